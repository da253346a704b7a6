#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "config.hpp"
#include "engine.hpp"
#include "event_log.hpp"
#include "proxy.hpp"

namespace footprint {

/// Mirrors log rows to a generic HTTP endpoint (one JSON row per POST).
class HttpLogSink : public LogSink {
 public:
  explicit HttpLogSink(const std::string& url) {
    auto parts = split_url(url);
    if (!parts || (parts->scheme != "http" && parts->scheme != "https"))
      throw ConfigError("server.http_sink_url must be an absolute http(s) URL");
    origin_ = parts->scheme + "://" + parts->authority;
    path_ = parts->path + (parts->query.empty() ? "" : "?" + parts->query);
  }

  void append(const LogRecord& r) override {
    httplib::Client cli(origin_);
    cli.set_connection_timeout(std::chrono::seconds(5));
    auto res = cli.Post(path_, to_jsonl(r), "application/json");
    if (!res || res->status / 100 != 2)
      throw LogWriteError("http log sink " + origin_ + path_ + " failed" +
                          (res ? ": status " + std::to_string(res->status) : ": " + httplib::to_string(res.error())));
    std::lock_guard lk(mu_);
    ++count_;
  }

  std::size_t size() const override {
    std::lock_guard lk(mu_);
    return count_;
  }

 private:
  std::string origin_, path_;
  mutable std::mutex mu_;
  std::size_t count_ = 0;
};

/// Per-user change counter that stream handlers wait on.
class UpdateHub {
 public:
  void publish(const Notification& n) {
    std::lock_guard lk(mu_);
    auto& ch = channels_[n.user_id];
    ++ch.version;
    if (n.popup) ch.popups.push_back(*n.popup);
    cv_.notify_all();
  }

  struct Wait {
    bool stopped = false;
    bool changed = false;
    std::uint64_t version = 0;
    std::vector<PopupPayload> popups;
  };

  Wait wait(const std::string& user, std::uint64_t seen, std::size_t& popups_seen, std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    // system_clock deadline: GCC 11's thread sanitizer cannot see steady-clock condvar waits
    cv_.wait_until(lk, std::chrono::system_clock::now() + timeout,
                   [&] { return stopping_ || channels_[user].version != seen; });
    Wait w;
    w.stopped = stopping_;
    auto& ch = channels_[user];
    w.version = ch.version;
    w.changed = ch.version != seen;
    for (std::size_t i = popups_seen; i < ch.popups.size(); ++i) w.popups.push_back(ch.popups[i]);
    popups_seen = ch.popups.size();
    return w;
  }

  std::pair<std::uint64_t, std::size_t> cursor(const std::string& user) {
    std::lock_guard lk(mu_);
    auto& ch = channels_[user];
    return {ch.version, ch.popups.size()};
  }

  void stop() {
    std::lock_guard lk(mu_);
    stopping_ = true;
    cv_.notify_all();
  }

 private:
  struct Channel {
    std::uint64_t version = 0;
    std::vector<PopupPayload> popups;
  };
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, Channel> channels_;
  bool stopping_ = false;
};

inline HttpTransactionRecord transaction_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("transaction record must be a JSON object");
  auto str = [&](const char* key) -> std::string {
    auto it = j.find(key);
    if (it == j.end() || it->is_null() || (it->is_string() && it->get<std::string>().empty()))
      throw std::invalid_argument(std::string("missing required field '") + key + "'");
    if (!it->is_string()) throw std::invalid_argument(std::string("field '") + key + "' must be a string");
    return it->get<std::string>();
  };
  HttpTransactionRecord tx;
  tx.user_id = str("user_id");
  tx.method = str("method");
  tx.url = str("url");
  auto st = j.find("status");
  if (st == j.end() || !st->is_number_integer()) throw std::invalid_argument("missing integer field 'status'");
  tx.status = st->get<int>();
  tx.observed_at = parse_instant(str("observed_at"));
  if (auto k = j.find("idempotency_key"); k != j.end() && !k->is_null()) {
    if (!k->is_string()) throw std::invalid_argument("field 'idempotency_key' must be a string");
    tx.idempotency_key = k->get<std::string>();
  }
  return tx;
}

/// The running gateway: HTTP API, update stream, optional proxy observer.
class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)), aliases_(cfg_.storage.alias_keyfile) {
    std::shared_ptr<LogSink> mirror;
    if (cfg_.server.http_sink_url) mirror = std::make_shared<HttpLogSink>(*cfg_.server.http_sink_url);
    engine_ = Engine::open(cfg_, mirror);
    engine_->set_listener([this](const Notification& n) { hub_.publish(n); });
    // small JSON replies on keep-alive connections otherwise wait out delayed ACKs
    server_.set_tcp_nodelay(true);
    routes();
  }

  ~Service() { stop(); }

  Engine& engine() { return *engine_; }

  /// Binds the API (and the proxy when enabled). Returns the API port.
  int start() {
    int port = cfg_.server.listen.port;
    if (port == 0) {
      port = server_.bind_to_any_port(cfg_.server.listen.host);
    } else if (!server_.bind_to_port(cfg_.server.listen.host, port)) {
      port = -1;
    }
    if (port < 0) throw std::runtime_error("cannot listen on " + cfg_.server.listen.to_string());
    port_ = port;
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    if (cfg_.proxy.enabled) {
      proxy_ = std::make_unique<ReverseProxy>(cfg_.proxy, [this](const HttpTransactionRecord& tx) { on_proxy_record(tx); });
      proxy_port_ = proxy_->start();
    }
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    hub_.stop();
    if (proxy_) proxy_->stop();
    server_.stop();
    if (listener_.joinable()) listener_.join();
    engine_->snapshot();
  }

  int port() const { return port_; }
  int proxy_port() const { return proxy_port_; }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, nlohmann::ordered_json{{"error", msg}});
  }

  bool authorized(const httplib::Request& req, httplib::Response& res) const {
    if (!cfg_.server.bearer_token) return true;
    if (req.get_header_value("Authorization") == "Bearer " + *cfg_.server.bearer_token) return true;
    send_error(res, 401, "missing or invalid bearer token");
    return false;
  }

  std::string alias_for(const std::string& external) { return aliases_.resolve(external); }

  void on_proxy_record(HttpTransactionRecord tx) {
    if (tx.user_id.empty()) {
      diag(DiagLevel::Warn, "proxy: transaction without user (set " + cfg_.proxy.user_header + " or default_user)");
      return;
    }
    try {
      tx.user_id = alias_for(tx.user_id);
      engine_->ingest_transaction(tx, EventSource::Proxy);
    } catch (const std::exception& e) {
      diag(DiagLevel::Warn, std::string("proxy: record dropped: ") + e.what());
    }
  }

  void routes() {
    server_.Get("/v1/healthz", [this](const httplib::Request&, httplib::Response& res) {
      auto h = engine_->health();
      send_json(res, h.ok() ? 200 : 503,
                nlohmann::ordered_json{{"status", h.ok() ? "ok" : "degraded"},
                                       {"log_failures", h.log_failures},
                                       {"last_error", h.last_error},
                                       {"log_records", h.log_records},
                                       {"users", h.users}});
    });

    server_.Get("/v1/config", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      send_json(res, 200, config_to_json(cfg_));
    });

    server_.Get(R"(/v1/state/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      try {
        auto user = alias_for(req.matches[1]);
        send_json(res, 200, to_json(engine_->get_state(user, now_utc())));
      } catch (const std::invalid_argument& e) {
        send_error(res, 422, e.what());
      }
    });

    auto transaction = [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        return send_error(res, 400, std::string("body is not JSON: ") + e.what());
      }
      HttpTransactionRecord tx;
      try {
        tx = transaction_from_json(body);
        tx.user_id = alias_for(tx.user_id);
      } catch (const std::exception& e) {
        return send_error(res, 422, e.what());
      }
      auto out = engine_->ingest_transaction(tx, EventSource::Webhook);
      if (out.status == IngestOutcome::Status::ClockSkew) return send_error(res, 409, out.detail);
      send_json(res, 200,
                nlohmann::ordered_json{{"accepted", true},
                                       {"counted", out.status == IngestOutcome::Status::Counted},
                                       {"duplicate", out.status == IngestOutcome::Status::Duplicate},
                                       {"log_persisted", out.log_persisted},
                                       {"popup", out.popup ? to_json(*out.popup) : nlohmann::ordered_json(nullptr)}});
    };
    server_.Post("/v1/events/transaction", transaction);
    server_.Post("/events/transaction", transaction);

    server_.Post("/v1/events/ui", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        return send_error(res, 400, std::string("body is not JSON: ") + e.what());
      }
      if (!body.is_object() || !body.contains("user_id") || !body["user_id"].is_string() ||
          body["user_id"].get<std::string>().empty())
        return send_error(res, 422, "missing required field 'user_id'");
      if (!body.contains("kind") || !body["kind"].is_string()) return send_error(res, 422, "missing field 'kind'");
      auto kind = parse_ui_kind(body["kind"].get<std::string>());
      if (!kind)
        return send_error(res, 422, "unknown kind '" + body["kind"].get<std::string>() +
                                        "' (expected popup_closed or readmore_clicked)");
      Instant at = now_utc();
      try {
        if (body.contains("at") && !body["at"].is_null()) at = parse_instant(body["at"].get<std::string>());
        auto user = alias_for(body["user_id"].get<std::string>());
        auto out = engine_->post_ui_event(user, *kind, at);
        send_json(res, 200, nlohmann::ordered_json{{"accepted", true},
                                                   {"state_changed", out.state_changed},
                                                   {"log_persisted", out.log_persisted}});
      } catch (const std::exception& e) {
        send_error(res, 422, e.what());
      }
    });

    server_.Get(R"(/v1/stream/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      std::string user;
      try {
        user = alias_for(req.matches[1]);
      } catch (const std::invalid_argument& e) {
        return send_error(res, 422, e.what());
      }
      auto cursor = hub_.cursor(user);
      struct StreamState {
        std::uint64_t version;
        std::size_t popups_seen;
        bool first = true;
      };
      auto st = std::make_shared<StreamState>(StreamState{cursor.first, cursor.second});
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [this, user, st](std::size_t, httplib::DataSink& sink) {
        auto send_state = [&] {
          auto msg = "event: state\ndata: " + to_json(engine_->get_state(user, now_utc())).dump() + "\n\n";
          return sink.write(msg.data(), msg.size());
        };
        if (st->first) {
          st->first = false;
          return send_state();
        }
        auto w = hub_.wait(user, st->version, st->popups_seen,
                           std::chrono::duration_cast<std::chrono::milliseconds>(cfg_.server.stream_tick));
        if (w.stopped) {
          sink.done();
          return false;
        }
        st->version = w.version;
        for (const auto& p : w.popups) {
          auto msg = "event: popup\ndata: " + to_json(p).dump() + "\n\n";
          if (!sink.write(msg.data(), msg.size())) return false;
        }
        return send_state();
      });
    });
  }

  ServiceConfig cfg_;
  AliasRegistry aliases_;
  std::unique_ptr<Engine> engine_;
  UpdateHub hub_;
  httplib::Server server_;
  std::unique_ptr<ReverseProxy> proxy_;
  std::thread listener_;
  int port_ = 0;
  int proxy_port_ = 0;
  std::atomic<bool> stopped_{false};
};

}  // namespace footprint
