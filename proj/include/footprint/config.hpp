#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "eco_score.hpp"
#include "footprint.hpp"
#include "ingest.hpp"
#include "popup.hpp"

namespace footprint {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HostPort {
  std::string host = "127.0.0.1";
  int port = 0;

  static HostPort parse(const std::string& s) {
    auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0) throw ConfigError("expected host:port, got '" + s + "'");
    HostPort hp;
    hp.host = s.substr(0, colon);
    try {
      std::size_t used = 0;
      hp.port = std::stoi(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument("junk");
    } catch (const std::exception&) {
      throw ConfigError("bad port in '" + s + "'");
    }
    if (hp.port < 0 || hp.port > 65535) throw ConfigError("port out of range in '" + s + "'");
    return hp;
  }
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

struct ProxySettings {
  bool enabled = false;
  HostPort listen{"127.0.0.1", 8081};
  HostPort upstream{"127.0.0.1", 80};
  std::string user_header = "X-Footprint-User";
  std::string default_user;
  std::string public_origin;  // empty: derive from the Host header
};

struct StorageSettings {
  std::filesystem::path dir = "./footprint-data";
  std::size_t snapshot_every = 100;
  std::optional<std::filesystem::path> alias_keyfile;
  bool durable = true;

  std::filesystem::path log_path() const { return dir / "events.jsonl"; }
  std::filesystem::path snapshot_path() const { return dir / "snapshot.json"; }
  std::filesystem::path idempotency_path() const { return dir / "idempotency.jsonl"; }
};

struct ServerSettings {
  HostPort listen{"127.0.0.1", 8080};
  std::optional<std::string> bearer_token;
  std::chrono::seconds stream_tick{20 * 60};
  std::optional<std::string> http_sink_url;
};

struct ServiceConfig {
  std::string profile = "paper-text";
  ResourceModel resources = resource_profile("paper-text");
  PenaltySchedule schedule;
  int initial_score = kMaxScore;
  PopupSettings popup;
  std::map<std::string, int> popup_user_limits;
  IngestRules ingest;
  Millis idempotency_window = std::chrono::hours{24};
  ProxySettings proxy;
  StorageSettings storage;
  ServerSettings server;
  std::string read_more_url = "https://www.iea.org/reports/electricity-2024";

  int popup_limit_for(const std::string& user) const {
    auto it = popup_user_limits.find(user);
    return it == popup_user_limits.end() ? popup.limit : it->second;
  }

  void validate() const {
    try {
      resources.validate();
      schedule.validate();
      popup.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (initial_score < kMinScore || initial_score > kMaxScore) throw ConfigError("score.initial must be in [0,100]");
    for (const auto& [u, l] : popup_user_limits)
      if (l <= 0) throw ConfigError("popup.user_limits." + u + " must be a positive integer");
    if (ingest.api_path_prefix.empty() || ingest.api_path_prefix.front() != '/')
      throw ConfigError("ingest.api_path_prefix must start with '/'");
    if (idempotency_window <= Millis{0}) throw ConfigError("ingest.idempotency_window_hours must be > 0");
    if (storage.snapshot_every == 0) throw ConfigError("storage.snapshot_every must be >= 1");
    if (server.stream_tick <= std::chrono::seconds{0}) throw ConfigError("server.stream_tick_seconds must be > 0");
    if (proxy.enabled && proxy.upstream.port == 0) throw ConfigError("ingest.proxy.upstream needs a port");
  }
};

namespace detail {

using json = nlohmann::json;

class KeyChecker {
 public:
  KeyChecker(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config key '" + display() + "' must be an object");
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + child(k) + "'");
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Micro decimal_value(const json& v, const std::string& key) {
  try {
    if (v.is_string()) return Micro::parse(v.get<std::string>());
    if (v.is_number()) return Micro::from_double(v.get<double>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
  throw ConfigError("config key '" + key + "' must be a number or decimal string");
}

inline std::string string_value(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

inline long long int_value(const json& v, const std::string& key) {
  if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  return v.get<long long>();
}

inline bool bool_value(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
  return v.get<bool>();
}

inline Millis minutes_value(const json& v, const std::string& key) {
  auto m = decimal_value(v, key);
  // minutes * 60000 ms, exact on the micro grid down to 0.06 ms
  auto ms = static_cast<long long>(static_cast<i128>(m.raw()) * 60'000 / Micro::kScale);
  return Millis{ms};
}

inline std::string millis_in(Millis d, long long unit_ms) {
  return Micro::from_raw(static_cast<std::int64_t>(static_cast<i128>(d.count()) * Micro::kScale / unit_ms)).to_string();
}

}  // namespace detail

/// Builds a config from a parsed document. `profile_override` (from the CLI)
/// wins over the document's "profile".
inline ServiceConfig config_from_json(const nlohmann::json& doc, std::optional<std::string> profile_override = {}) {
  using detail::KeyChecker;
  ServiceConfig cfg;
  KeyChecker root(doc, "");

  if (auto v = root.get("profile")) cfg.profile = detail::string_value(*v, "profile");
  if (profile_override) cfg.profile = *profile_override;
  try {
    cfg.resources = resource_profile(cfg.profile);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  if (auto r = root.get("resource")) {
    KeyChecker k(*r, "resource");
    auto dec = [&](const char* key, Micro& dst) {
      if (auto v = k.get(key)) dst = detail::decimal_value(*v, k.child(key));
    };
    dec("energy_per_query_wh", cfg.resources.energy_per_query);
    dec("water_per_query_ml", cfg.resources.water_per_query);
    dec("bulb_power_w", cfg.resources.bulb_power);
    dec("cup_volume_ml", cfg.resources.cup_volume);
    dec("vehicle_efficiency_wh_per_mile", cfg.resources.vehicle_efficiency);
    dec("bathtub_volume_l", cfg.resources.bathtub_volume);
    dec("hottub_volume_l", cfg.resources.hottub_volume);
    dec("energy_tier_threshold_bulb_hours", cfg.resources.energy_tier_threshold);
    if (auto v = k.get("water_tier_thresholds_l")) {
      if (!v->is_array() || v->size() != 2)
        throw ConfigError("config key 'resource.water_tier_thresholds_l' must be a 2-element array");
      cfg.resources.water_tier_thresholds = {detail::decimal_value((*v)[0], "resource.water_tier_thresholds_l[0]"),
                                             detail::decimal_value((*v)[1], "resource.water_tier_thresholds_l[1]")};
    }
    k.finish();
  }

  if (auto s = root.get("score")) {
    KeyChecker k(*s, "score");
    if (auto v = k.get("initial")) cfg.initial_score = static_cast<int>(detail::int_value(*v, "score.initial"));
    if (auto v = k.get("regen_period_minutes")) cfg.schedule.regen_period = detail::minutes_value(*v, "score.regen_period_minutes");
    if (auto v = k.get("tiers")) {
      if (!v->is_array()) throw ConfigError("config key 'score.tiers' must be an array");
      cfg.schedule.tiers.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        auto path = "score.tiers[" + std::to_string(i) + "]";
        KeyChecker t((*v)[i], path);
        PenaltyTier tier;
        auto mp = t.get("min_pause_minutes");
        auto pen = t.get("penalty");
        if (!mp || !pen) throw ConfigError(path + " needs min_pause_minutes and penalty");
        tier.min_pause = detail::minutes_value(*mp, path + ".min_pause_minutes");
        tier.penalty = static_cast<int>(detail::int_value(*pen, path + ".penalty"));
        t.finish();
        cfg.schedule.tiers.push_back(tier);
      }
    }
    k.finish();
  }

  if (auto p = root.get("popup")) {
    KeyChecker k(*p, "popup");
    if (auto v = k.get("limit")) cfg.popup.limit = static_cast<int>(detail::int_value(*v, "popup.limit"));
    if (auto v = k.get("mode")) {
      auto m = detail::string_value(*v, "popup.mode");
      if (m == "count")
        cfg.popup.mode = PopupMode::Count;
      else if (m == "resource-threshold")
        cfg.popup.mode = PopupMode::ResourceThreshold;
      else
        throw ConfigError("config key 'popup.mode' must be count or resource-threshold");
    }
    if (auto v = k.get("energy_limit_wh")) cfg.popup.energy_limit = detail::decimal_value(*v, "popup.energy_limit_wh");
    if (auto v = k.get("water_limit_ml")) cfg.popup.water_limit = detail::decimal_value(*v, "popup.water_limit_ml");
    if (auto v = k.get("user_limits")) {
      KeyChecker u(*v, "popup.user_limits");
      for (const auto& [user, lim] : v->items()) {
        u.get(user);
        cfg.popup_user_limits[user] = static_cast<int>(detail::int_value(lim, "popup.user_limits." + user));
      }
      u.finish();
    }
    k.finish();
  }

  if (auto i = root.get("ingest")) {
    KeyChecker k(*i, "ingest");
    if (auto v = k.get("api_path_prefix")) cfg.ingest.api_path_prefix = detail::string_value(*v, "ingest.api_path_prefix");
    if (auto v = k.get("ignore_substrings")) {
      if (!v->is_array()) throw ConfigError("config key 'ingest.ignore_substrings' must be an array of strings");
      cfg.ingest.ignore_substrings.clear();
      for (const auto& s : *v) cfg.ingest.ignore_substrings.push_back(detail::string_value(s, "ingest.ignore_substrings[]"));
    }
    if (auto v = k.get("idempotency_window_hours")) {
      auto h = detail::decimal_value(*v, "ingest.idempotency_window_hours");
      cfg.idempotency_window = Millis{static_cast<long long>(static_cast<i128>(h.raw()) * 3'600'000 / Micro::kScale)};
    }
    if (auto v = k.get("proxy")) {
      KeyChecker pk(*v, "ingest.proxy");
      if (auto x = pk.get("enabled")) cfg.proxy.enabled = detail::bool_value(*x, "ingest.proxy.enabled");
      if (auto x = pk.get("listen")) cfg.proxy.listen = HostPort::parse(detail::string_value(*x, "ingest.proxy.listen"));
      if (auto x = pk.get("upstream")) cfg.proxy.upstream = HostPort::parse(detail::string_value(*x, "ingest.proxy.upstream"));
      if (auto x = pk.get("user_header")) cfg.proxy.user_header = detail::string_value(*x, "ingest.proxy.user_header");
      if (auto x = pk.get("default_user")) cfg.proxy.default_user = detail::string_value(*x, "ingest.proxy.default_user");
      if (auto x = pk.get("public_origin")) cfg.proxy.public_origin = detail::string_value(*x, "ingest.proxy.public_origin");
      pk.finish();
    }
    k.finish();
  }

  if (auto s = root.get("storage")) {
    KeyChecker k(*s, "storage");
    if (auto v = k.get("dir")) cfg.storage.dir = detail::string_value(*v, "storage.dir");
    if (auto v = k.get("snapshot_every")) {
      auto n = detail::int_value(*v, "storage.snapshot_every");
      if (n <= 0) throw ConfigError("storage.snapshot_every must be >= 1");
      cfg.storage.snapshot_every = static_cast<std::size_t>(n);
    }
    if (auto v = k.get("alias_keyfile")) cfg.storage.alias_keyfile = detail::string_value(*v, "storage.alias_keyfile");
    if (auto v = k.get("durable")) cfg.storage.durable = detail::bool_value(*v, "storage.durable");
    k.finish();
  }

  if (auto s = root.get("server")) {
    KeyChecker k(*s, "server");
    if (auto v = k.get("listen")) cfg.server.listen = HostPort::parse(detail::string_value(*v, "server.listen"));
    if (auto v = k.get("bearer_token")) cfg.server.bearer_token = detail::string_value(*v, "server.bearer_token");
    if (auto v = k.get("stream_tick_seconds"))
      cfg.server.stream_tick = std::chrono::seconds{detail::int_value(*v, "server.stream_tick_seconds")};
    if (auto v = k.get("http_sink_url")) cfg.server.http_sink_url = detail::string_value(*v, "server.http_sink_url");
    k.finish();
  }

  if (auto v = root.get("read_more_url")) cfg.read_more_url = detail::string_value(*v, "read_more_url");
  root.finish();
  cfg.validate();
  return cfg;
}

/// Reads a JSON config file; // and /* */ comments are allowed.
inline ServiceConfig load_config(const std::filesystem::path& path, std::optional<std::string> profile_override = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(doc, std::move(profile_override));
}

/// FOOTPRINT_LISTEN and FOOTPRINT_STORAGE_DIR override the file.
inline void apply_env_overrides(ServiceConfig& cfg) {
  if (const char* v = std::getenv("FOOTPRINT_LISTEN"); v && *v) cfg.server.listen = HostPort::parse(v);
  if (const char* v = std::getenv("FOOTPRINT_STORAGE_DIR"); v && *v) cfg.storage.dir = v;
}

/// Effective configuration as JSON (bearer token redacted).
inline nlohmann::ordered_json config_to_json(const ServiceConfig& cfg) {
  using oj = nlohmann::ordered_json;
  oj tiers = oj::array();
  for (const auto& t : cfg.schedule.tiers)
    tiers.push_back(oj{{"min_pause_minutes", detail::millis_in(t.min_pause, 60'000)},
                       {"penalty", t.penalty}});
  oj user_limits = oj::object();
  for (const auto& [u, l] : cfg.popup_user_limits) user_limits[u] = l;
  oj ignore = oj::array();
  for (const auto& s : cfg.ingest.ignore_substrings) ignore.push_back(s);
  const auto& r = cfg.resources;
  return oj{
      {"profile", cfg.profile},
      {"resource",
       {{"energy_per_query_wh", r.energy_per_query.to_string()},
        {"water_per_query_ml", r.water_per_query.to_string()},
        {"bulb_power_w", r.bulb_power.to_string()},
        {"cup_volume_ml", r.cup_volume.to_string()},
        {"vehicle_efficiency_wh_per_mile", r.vehicle_efficiency.to_string()},
        {"bathtub_volume_l", r.bathtub_volume.to_string()},
        {"hottub_volume_l", r.hottub_volume.to_string()},
        {"energy_tier_threshold_bulb_hours", r.energy_tier_threshold.to_string()},
        {"water_tier_thresholds_l",
         oj::array({r.water_tier_thresholds.first.to_string(), r.water_tier_thresholds.second.to_string()})}}},
      {"score",
       {{"initial", cfg.initial_score},
        {"regen_period_minutes", detail::millis_in(cfg.schedule.regen_period, 60'000)},
        {"tiers", tiers}}},
      {"popup",
       {{"limit", cfg.popup.limit},
        {"mode", std::string(popup_mode_name(cfg.popup.mode))},
        {"energy_limit_wh", cfg.popup.energy_limit.to_string()},
        {"water_limit_ml", cfg.popup.water_limit.to_string()},
        {"user_limits", user_limits}}},
      {"ingest",
       {{"api_path_prefix", cfg.ingest.api_path_prefix},
        {"ignore_substrings", ignore},
        {"idempotency_window_hours", detail::millis_in(cfg.idempotency_window, 3'600'000)},
        {"proxy",
         {{"enabled", cfg.proxy.enabled},
          {"listen", cfg.proxy.listen.to_string()},
          {"upstream", cfg.proxy.upstream.to_string()},
          {"user_header", cfg.proxy.user_header},
          {"default_user", cfg.proxy.default_user},
          {"public_origin", cfg.proxy.public_origin}}}}},
      {"storage",
       {{"dir", cfg.storage.dir.string()},
        {"snapshot_every", cfg.storage.snapshot_every},
        {"alias_keyfile", cfg.storage.alias_keyfile ? oj(cfg.storage.alias_keyfile->string()) : oj(nullptr)},
        {"durable", cfg.storage.durable}}},
      {"server",
       {{"listen", cfg.server.listen.to_string()},
        {"bearer_token", cfg.server.bearer_token ? oj("<redacted>") : oj(nullptr)},
        {"stream_tick_seconds", cfg.server.stream_tick.count()},
        {"http_sink_url", cfg.server.http_sink_url ? oj(*cfg.server.http_sink_url) : oj(nullptr)}}},
      {"read_more_url", cfg.read_more_url},
  };
}

}  // namespace footprint
