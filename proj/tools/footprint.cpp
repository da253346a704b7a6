// footprint: eco-feedback gateway for LLM chat traffic.
//
//   footprint serve         [--config FILE] [--profile NAME]
//   footprint replay        --trace FILE [--until ISO] [--out FILE] [--log FILE]
//   footprint analyze       --export conversations.json --download-date YYYY-MM-DD [--json]
//   footprint export        [--log FILE] [--from ISO] [--to ISO] [--format csv|jsonl]
//   footprint dwell         [--log FILE] [--json]
//   footprint config-check  [--config FILE] [--profile NAME]

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "footprint/config.hpp"
#include "footprint/event_log.hpp"
#include "footprint/history.hpp"
#include "footprint/replay.hpp"
#include "footprint/service.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_output(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path);
}

footprint::ServiceConfig load(const std::string& config_path, const std::string& profile) {
  std::optional<std::string> prof;
  if (!profile.empty()) prof = profile;
  footprint::ServiceConfig cfg;
  if (config_path.empty()) {
    cfg = footprint::config_from_json(nlohmann::json::object(), prof);
  } else {
    cfg = footprint::load_config(config_path, prof);
  }
  footprint::apply_env_overrides(cfg);
  cfg.validate();
  return cfg;
}

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Eco-feedback gateway: LLM query detection, footprint accounting and Eco Score"};
  app.require_subcommand(1);

  std::string config_path, profile;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file (comments allowed)");
    sub->add_option("-p,--profile", profile, "resource profile: paper-text | paper-figures");
  };

  auto* serve = app.add_subcommand("serve", "run the HTTP API (and the proxy observer when enabled)");
  add_config(serve);
  bool verbose = false;
  serve->add_flag("-v,--verbose", verbose, "diagnostic logging");

  auto* rep = app.add_subcommand("replay", "replay a timestamped event trace and print the trajectory as JSON");
  add_config(rep);
  std::string trace_path, until_text, out_path, log_out;
  rep->add_option("-t,--trace", trace_path, "trace file (JSON Lines)")->required();
  rep->add_option("--until", until_text, "observation instant for the final bundles (ISO-8601)");
  rep->add_option("-o,--out", out_path, "write the trajectory here instead of stdout");
  rep->add_option("--log", log_out, "also write the event log produced by the replay (JSONL)");

  auto* analyze = app.add_subcommand("analyze", "count user messages in a chat-history export around a date");
  add_config(analyze);
  std::string export_path, download_date;
  bool as_json = false;
  analyze->add_option("-e,--export", export_path, "conversations.json from the chat-history export")->required();
  analyze->add_option("-d,--download-date", download_date, "YYYY-MM-DD, anchored at 00:00 UTC")->required();
  analyze->add_flag("--json", as_json, "JSON output");

  auto* exp = app.add_subcommand("export", "export the event log as CSV or JSONL");
  add_config(exp);
  std::string log_path, from_text, to_text, format = "csv";
  exp->add_option("--log", log_path, "event log (default: <storage.dir>/events.jsonl)");
  exp->add_option("--from", from_text, "inclusive lower bound (ISO-8601)");
  exp->add_option("--to", to_text, "exclusive upper bound (ISO-8601)");
  exp->add_option("-f,--format", format, "csv | jsonl")->check(CLI::IsMember({"csv", "jsonl", "CSV", "JSONL"}));
  exp->add_option("-o,--out", out_path, "output file (default stdout)");

  auto* dwell = app.add_subcommand("dwell", "popup dwell times and next-query delays from the event log");
  add_config(dwell);
  dwell->add_option("--log", log_path, "event log (default: <storage.dir>/events.jsonl)");
  dwell->add_flag("--json", as_json, "JSON output");

  auto* check = app.add_subcommand("config-check", "validate a config file and print the effective settings");
  add_config(check);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) {
      footprint::set_diag_threshold(verbose ? footprint::DiagLevel::Debug : footprint::DiagLevel::Info);
      auto cfg = load(config_path, profile);
      footprint::Service svc(cfg);
      int port = svc.start();
      std::cerr << "footprint: API on " << cfg.server.listen.host << ":" << port;
      if (cfg.proxy.enabled) std::cerr << ", proxy on " << cfg.proxy.listen.host << ":" << svc.proxy_port();
      std::cerr << ", storage " << cfg.storage.dir << "\n";
      std::signal(SIGINT, [](int) { g_stop = 1; });
      std::signal(SIGTERM, [](int) { g_stop = 1; });
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      svc.stop();
      return 0;
    }

    if (*rep) {
      auto cfg = load(config_path, profile);
      auto trace = footprint::parse_trace(read_file(trace_path));
      std::optional<footprint::Instant> until;
      if (!until_text.empty()) until = footprint::parse_instant(until_text);
      auto result = footprint::replay(trace, cfg, until);
      write_output(out_path, footprint::to_json(result).dump(2) + "\n");
      if (!log_out.empty()) {
        std::string lines;
        for (const auto& r : result.log) lines += footprint::to_jsonl(r) + "\n";
        write_output(log_out, lines);
      }
      return 0;
    }

    if (*analyze) {
      auto cfg = load(config_path, profile);
      auto parsed = footprint::parse_export(read_file(export_path));
      auto window = footprint::AnalysisWindow::from_date(footprint::parse_date(download_date));
      auto report = footprint::count_windows(parsed, window);
      auto fp = footprint::footprint_report(report, cfg.resources);
      if (as_json)
        std::cout << footprint::render_json(report, fp, window).dump(2) << "\n";
      else
        std::cout << footprint::render_text(report, fp);
      return 0;
    }

    if (*exp) {
      auto cfg = load(config_path, profile);
      auto path = log_path.empty() ? cfg.storage.log_path() : std::filesystem::path(log_path);
      footprint::TimeWindow window;
      if (!from_text.empty()) window.from = footprint::parse_instant(from_text);
      if (!to_text.empty()) window.to = footprint::parse_instant(to_text);
      auto records = footprint::read_jsonl_log(path);
      write_output(out_path, footprint::export_records(records, window, footprint::parse_export_format(format)));
      return 0;
    }

    if (*dwell) {
      auto cfg = load(config_path, profile);
      auto path = log_path.empty() ? cfg.storage.log_path() : std::filesystem::path(log_path);
      auto rep_ = footprint::popup_dwell_report(footprint::read_jsonl_log(path));
      auto secs = [](std::optional<footprint::Millis> d) {
        return d ? nlohmann::ordered_json(static_cast<double>(d->count()) / 1000.0) : nlohmann::ordered_json(nullptr);
      };
      if (as_json) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& p : rep_.popups)
          rows.push_back({{"user_id", p.user_id},
                          {"opened_at", footprint::format_instant(p.opened_at)},
                          {"dwell_seconds", secs(p.dwell)},
                          {"next_query_delay_seconds", secs(p.next_query_delay)},
                          {"bucket", std::string(footprint::delay_bucket_name(p.bucket))},
                          {"incomplete", p.incomplete()}});
        std::cout << nlohmann::ordered_json{{"popups", rows},
                                            {"under_10_min", rep_.under_10_min},
                                            {"10_min_or_more", rep_.ten_min_or_more},
                                            {"no_later_query", rep_.no_later_query},
                                            {"incomplete", rep_.incomplete},
                                            {"unmatched_closes", rep_.unmatched_closes}}
                         .dump(2)
                  << "\n";
      } else {
        for (const auto& p : rep_.popups) {
          std::cout << p.user_id << " " << footprint::format_instant(p.opened_at) << " dwell="
                    << (p.dwell ? std::to_string(p.dwell->count() / 1000.0) + "s" : "incomplete") << " next_query="
                    << (p.next_query_delay ? std::to_string(p.next_query_delay->count() / 1000.0) + "s" : "none")
                    << " " << footprint::delay_bucket_name(p.bucket) << "\n";
        }
        std::cout << "popups=" << rep_.popups.size() << " under_10_min=" << rep_.under_10_min
                  << " 10_min_or_more=" << rep_.ten_min_or_more << " no_later_query=" << rep_.no_later_query
                  << " incomplete=" << rep_.incomplete << "\n";
      }
      return 0;
    }

    if (*check) {
      auto cfg = load(config_path, profile);
      std::cout << footprint::config_to_json(cfg).dump(2) << "\n";
      std::cerr << "config OK\n";
      return 0;
    }
  } catch (const footprint::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
