#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "footprint.hpp"
#include "time.hpp"

namespace footprint {

using Micros = std::chrono::microseconds;
using MicroInstant = std::chrono::sys_time<Micros>;

/// One user-authored message from a chat-history export.
struct UserMessage {
  std::size_t conversation = 0;
  std::string message_id;
  MicroInstant created_at{};
};

struct ConversationExport {
  std::size_t conversations = 0;
  std::vector<UserMessage> user_messages;
};

struct ExportParseError : std::runtime_error {
  ExportParseError(const std::string& what, std::size_t byte) : std::runtime_error(what), byte_offset(byte) {}
  std::size_t byte_offset;
};

struct ExportSchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Epoch seconds (fractional) to a microsecond instant, rounding to the
/// nearest microsecond.
inline MicroInstant epoch_seconds_to_instant(double seconds) {
  double whole = std::floor(seconds);
  auto micros = static_cast<std::int64_t>(std::nearbyint((seconds - whole) * 1e6));
  return MicroInstant{Micros{static_cast<std::int64_t>(whole) * 1'000'000 + micros}};
}

/// Tolerant walk of conversations[*].mapping[*].message: nodes without a
/// message, an author, a "user" role or a numeric create_time are skipped.
inline ConversationExport parse_export(std::string_view document) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw ExportParseError(std::string("conversation export is not valid JSON (byte ") + std::to_string(e.byte) +
                               "): " + e.what(),
                           e.byte);
  }
  if (!root.is_array()) throw ExportSchemaError("conversation export must be a JSON array of conversations");

  ConversationExport out;
  out.conversations = root.size();
  for (std::size_t ci = 0; ci < root.size(); ++ci) {
    const auto& conv = root[ci];
    if (!conv.is_object()) continue;
    auto mapping = conv.find("mapping");
    if (mapping == conv.end() || !mapping->is_object()) continue;
    for (const auto& [id, node] : mapping->items()) {
      if (!node.is_object()) continue;
      auto msg = node.find("message");
      if (msg == node.end() || !msg->is_object() || msg->empty()) continue;
      auto author = msg->find("author");
      if (author == msg->end() || !author->is_object()) continue;
      auto role = author->find("role");
      if (role == author->end() || !role->is_string() || role->get<std::string>() != "user") continue;
      auto ct = msg->find("create_time");
      if (ct == msg->end() || !ct->is_number()) continue;
      out.user_messages.push_back(UserMessage{ci, id, epoch_seconds_to_instant(ct->get<double>())});
    }
  }
  return out;
}

/// pre: [download - 7d, download), trial: [download, download + 7d].
struct AnalysisWindow {
  MicroInstant download_date{};

  static AnalysisWindow from_date(std::chrono::sys_days day) { return AnalysisWindow{MicroInstant{day}}; }

  MicroInstant pre_start() const { return download_date - std::chrono::days{7}; }
  MicroInstant trial_end() const { return download_date + std::chrono::days{7}; }
  bool in_pre(MicroInstant t) const { return pre_start() <= t && t < download_date; }
  bool in_trial(MicroInstant t) const { return download_date <= t && t <= trial_end(); }
};

struct WindowFootprint {
  std::int64_t queries = 0;
  Micro energy_wh;
  Micro water_ml;
  HumanScaleReading human_energy;
  HumanScaleReading human_water;
};

struct UsageReport {
  std::int64_t queries_in_trial = 0;
  std::int64_t queries_before_trial = 0;
  std::int64_t total_user_messages = 0;
};

inline UsageReport count_windows(const ConversationExport& exp, const AnalysisWindow& window) {
  UsageReport r;
  r.total_user_messages = static_cast<std::int64_t>(exp.user_messages.size());
  for (const auto& m : exp.user_messages) {
    if (window.in_pre(m.created_at))
      ++r.queries_before_trial;
    else if (window.in_trial(m.created_at))
      ++r.queries_in_trial;
  }
  return r;
}

inline WindowFootprint window_footprint(std::int64_t queries, const ResourceModel& model) {
  WindowFootprint w;
  w.queries = queries;
  w.energy_wh = model.energy_per_query * queries;
  w.water_ml = model.water_per_query * queries;
  w.human_energy = to_human_energy(w.energy_wh, model);
  w.human_water = to_human_water(w.water_ml, model);
  return w;
}

struct FootprintSummary {
  WindowFootprint before;
  WindowFootprint trial;
};

inline FootprintSummary footprint_report(const UsageReport& report, const ResourceModel& model) {
  return FootprintSummary{window_footprint(report.queries_before_trial, model),
                          window_footprint(report.queries_in_trial, model)};
}

/// The two count lines exactly as the audit notebook printed them, followed
/// by the footprint of each window.
inline std::string render_text(const UsageReport& report, const FootprintSummary& fp) {
  std::string out;
  out += "Number of queries within study period: " + std::to_string(report.queries_in_trial) + "\n";
  out += "Number of queries before study period: " + std::to_string(report.queries_before_trial) + "\n";
  auto line = [](const char* label, const WindowFootprint& w) {
    return std::string(label) + ": " + format_metric(w.energy_wh) + " Wh (" + energy_kwh_text(w.energy_wh) +
           " kWh, " + w.human_energy.formatted + " " + std::string(w.human_energy.unit_label()) + "), " +
           format_metric(w.water_ml) + " mL (" + water_liters_text(w.water_ml) + " liters, " +
           w.human_water.formatted + " " + std::string(w.human_water.unit_label()) + ")\n";
  };
  out += line("Footprint within study period", fp.trial);
  out += line("Footprint before study period", fp.before);
  return out;
}

inline nlohmann::ordered_json reading_json(const HumanScaleReading& r) {
  return nlohmann::ordered_json{{"quantity", r.formatted},
                                {"unit", std::string(r.unit_label())},
                                {"pictogram_count", r.pictogram_count}};
}

inline nlohmann::ordered_json render_json(const UsageReport& report, const FootprintSummary& fp,
                                          const AnalysisWindow& window) {
  auto win = [](const WindowFootprint& w, MicroInstant from, MicroInstant to, bool closed_right) {
    return nlohmann::ordered_json{
        {"from", format_instant(std::chrono::floor<Millis>(from))},
        {"to", format_instant(std::chrono::floor<Millis>(to))},
        {"right_closed", closed_right},
        {"queries", w.queries},
        {"energy_wh", format_metric(w.energy_wh)},
        {"energy_kwh", energy_kwh_text(w.energy_wh)},
        {"water_ml", format_metric(w.water_ml)},
        {"water_liters", water_liters_text(w.water_ml)},
        {"human_energy", reading_json(w.human_energy)},
        {"human_water", reading_json(w.human_water)},
    };
  };
  return nlohmann::ordered_json{
      {"queries_in_trial", report.queries_in_trial},
      {"queries_before_trial", report.queries_before_trial},
      {"total_user_messages", report.total_user_messages},
      {"trial", win(fp.trial, window.download_date, window.trial_end(), true)},
      {"before_trial", win(fp.before, window.pre_start(), window.download_date, false)},
  };
}

}  // namespace footprint
