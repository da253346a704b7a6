#pragma once

#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "engine.hpp"
#include "event_log.hpp"

namespace footprint {

/// One row of a replay trace. `tick` only advances the observation clock.
enum class TraceKind { Query, PopupClosed, ReadmoreClicked, Tick };

inline std::string_view trace_kind_name(TraceKind k) {
  switch (k) {
    case TraceKind::Query: return "query";
    case TraceKind::PopupClosed: return "popup_closed";
    case TraceKind::ReadmoreClicked: return "readmore_clicked";
    case TraceKind::Tick: return "tick";
  }
  return "?";
}

struct TraceEvent {
  std::string user_id;
  Instant occurred_at{};
  TraceKind kind = TraceKind::Query;
};

struct TraceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// JSON Lines, one {"user_id", "occurred_at", "kind"?} object per line;
/// kind defaults to "query". Blank lines and lines starting with '#' are
/// skipped. Rows must be non-decreasing in time per user.
inline std::vector<TraceEvent> parse_trace(std::string_view text) {
  std::vector<TraceEvent> out;
  std::map<std::string, Instant> last_seen;
  std::size_t start = 0, lineno = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() : nl + 1;
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    auto where = "trace line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw TraceError(where + e.what());
    }
    if (!j.is_object() || !j.contains("user_id") || !j["user_id"].is_string() || !j.contains("occurred_at") ||
        !j["occurred_at"].is_string())
      throw TraceError(where + "needs string fields user_id and occurred_at");
    TraceEvent ev;
    ev.user_id = j["user_id"].get<std::string>();
    try {
      ev.occurred_at = parse_instant(j["occurred_at"].get<std::string>());
    } catch (const TimeParseError& e) {
      throw TraceError(where + e.what());
    }
    if (j.contains("kind")) {
      auto k = j["kind"].is_string() ? j["kind"].get<std::string>() : std::string();
      if (k == "query") ev.kind = TraceKind::Query;
      else if (k == "popup_closed") ev.kind = TraceKind::PopupClosed;
      else if (k == "readmore_clicked") ev.kind = TraceKind::ReadmoreClicked;
      else if (k == "tick") ev.kind = TraceKind::Tick;
      else throw TraceError(where + "unknown kind '" + k + "'");
    }
    auto [it, fresh] = last_seen.try_emplace(ev.user_id, ev.occurred_at);
    if (!fresh) {
      if (ev.occurred_at < it->second)
        throw TraceError(where + "trace is not sorted for user " + ev.user_id + " (" +
                         format_instant(ev.occurred_at) + " < " + format_instant(it->second) + ")");
      it->second = ev.occurred_at;
    }
    out.push_back(std::move(ev));
  }
  return out;
}

struct TrajectoryStep {
  std::size_t index = 0;
  TraceEvent event;
  int score = 0;  // observed at the event instant, after the event
  std::int64_t query_count = 0;
  bool popup_fired = false;
  bool popup_open = false;
};

struct ReplayResult {
  std::vector<TrajectoryStep> steps;
  std::map<std::string, std::int64_t> popups_fired;
  std::map<std::string, DisplayBundle> final_bundles;
  std::vector<LogRecord> log;
  Instant until{};
};

/// Runs a trace through a fresh engine. Final bundles are observed at
/// `until` (default: the latest trace instant).
inline ReplayResult replay(const std::vector<TraceEvent>& trace, const ServiceConfig& cfg,
                           std::optional<Instant> until = std::nullopt) {
  auto sink = std::make_shared<MemoryLogSink>();
  Engine engine(cfg, sink);
  ReplayResult res;
  std::optional<Instant> latest;
  std::vector<std::string> users;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& ev = trace[i];
    if (!latest || *latest < ev.occurred_at) latest = ev.occurred_at;
    if (!res.popups_fired.count(ev.user_id)) {
      res.popups_fired[ev.user_id] = 0;
      users.push_back(ev.user_id);
    }
    TrajectoryStep step;
    step.index = i;
    step.event = ev;
    switch (ev.kind) {
      case TraceKind::Query: {
        auto out = engine.apply_query(QueryEvent{ev.user_id, ev.occurred_at, EventSource::Replay});
        if (out.status == IngestOutcome::Status::ClockSkew) throw TraceError(out.detail);
        step.popup_fired = out.popup.has_value();
        if (step.popup_fired) ++res.popups_fired[ev.user_id];
        break;
      }
      case TraceKind::PopupClosed:
        engine.post_ui_event(ev.user_id, UiEventKind::PopupClosed, ev.occurred_at);
        break;
      case TraceKind::ReadmoreClicked:
        engine.post_ui_event(ev.user_id, UiEventKind::ReadmoreClicked, ev.occurred_at);
        break;
      case TraceKind::Tick:
        break;
    }
    auto bundle = engine.get_state(ev.user_id, ev.occurred_at);
    step.score = bundle.eco_score;
    step.query_count = bundle.query_count;
    step.popup_open = bundle.popup.has_value();
    res.steps.push_back(std::move(step));
  }
  res.until = until ? *until : latest.value_or(Instant{});
  for (const auto& u : users) res.final_bundles.emplace(u, engine.get_state(u, res.until));
  res.log = sink->records();
  return res;
}

inline nlohmann::ordered_json to_json(const ReplayResult& r) {
  using oj = nlohmann::ordered_json;
  oj steps = oj::array();
  for (const auto& s : r.steps)
    steps.push_back(oj{{"index", s.index},
                       {"user_id", s.event.user_id},
                       {"occurred_at", format_instant(s.event.occurred_at)},
                       {"kind", std::string(trace_kind_name(s.event.kind))},
                       {"score", s.score},
                       {"query_count", s.query_count},
                       {"popup_fired", s.popup_fired},
                       {"popup_open", s.popup_open}});
  oj fired = oj::object();
  for (const auto& [u, n] : r.popups_fired) fired[u] = n;
  oj finals = oj::object();
  for (const auto& [u, b] : r.final_bundles) finals[u] = to_json(b);
  return oj{{"until", format_instant(r.until)}, {"steps", steps}, {"popups_fired", fired}, {"final", finals}};
}

}  // namespace footprint
