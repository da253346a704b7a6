#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "diag.hpp"
#include "eco_score.hpp"
#include "event_log.hpp"
#include "footprint.hpp"
#include "ingest.hpp"
#include "popup.hpp"
#include "time.hpp"

namespace footprint {

/// Everything the service tracks for one pseudonymous user.
struct UserState {
  UsageLedger ledger;
  EcoScoreState score;
  PopupPolicyState popup;
  std::optional<PopupPayload> open_popup;
  bool started = false;

  bool same_as(const UserState& o) const {
    return ledger == o.ledger && score == o.score && popup == o.popup && started == o.started &&
           open_popup.has_value() == o.open_popup.has_value() &&
           (!open_popup || (open_popup->query_count == o.open_popup->query_count &&
                            open_popup->opened_at == o.open_popup->opened_at &&
                            open_popup->energy_kwh == o.open_popup->energy_kwh));
  }
};

/// Pure transition functions shared by the live pipeline and log replay.
namespace transitions {

inline UserState pristine(const std::string& user, const ServiceConfig& cfg) {
  UserState s;
  s.ledger.user_id = user;
  s.score.score = cfg.initial_score;
  s.popup.limit = cfg.popup_limit_for(user);
  return s;
}

/// Accrue, charge the pause penalty, count the query, advance the popup.
/// Throws ClockSkewError (state untouched) when `at` precedes the user's
/// last accrual.
inline std::optional<PopupPayload> query(UserState& s, const ServiceConfig& cfg, Instant at) {
  UserState next = s;
  if (!next.started) {
    next.score = EcoScoreState::fresh(at, next.score.score);
    next.started = true;
  }
  next.score = accrue(next.score, cfg.schedule, at);
  next.score = apply_query(next.score, cfg.schedule, at);
  next.ledger = record_query(next.ledger, cfg.resources, at);
  auto decision = on_query(next.popup, next.ledger, cfg.resources, cfg.popup, cfg.read_more_url, at);
  next.popup = decision.state;
  if (decision.payload) next.open_popup = decision.payload;
  s = std::move(next);
  return decision.payload;
}

inline bool popup_closed(UserState& s, Instant at) {
  auto [st, changed] = on_dismiss(s.popup, at);
  s.popup = st;
  if (changed) s.open_popup.reset();
  return changed;
}

}  // namespace transitions

struct DisplayBundle {
  std::string user_id;
  int eco_score = kMaxScore;
  int image_bracket = 1;
  HumanScaleReading energy;
  HumanScaleReading water;
  std::string energy_kwh_text;
  std::string water_liters_text;
  std::int64_t query_count = 0;
  std::optional<PopupPayload> popup;
  std::string read_more_url;
  Instant as_of{};
};

inline DisplayBundle make_bundle(const UserState& s, const ServiceConfig& cfg, Instant now) {
  EcoScoreState score = s.score;
  if (s.started && score.last_accrual_at <= now) score = accrue(score, cfg.schedule, now);
  DisplayBundle b;
  b.user_id = s.ledger.user_id;
  b.eco_score = score.score;
  b.image_bracket = image_bracket(score.score);
  b.energy = to_human_energy(s.ledger.energy_total, cfg.resources);
  b.water = to_human_water(s.ledger.water_total, cfg.resources);
  b.energy_kwh_text = energy_kwh_text(s.ledger.energy_total);
  b.water_liters_text = water_liters_text(s.ledger.water_total);
  b.query_count = s.ledger.query_count;
  b.popup = s.popup.popup_open ? s.open_popup : std::nullopt;
  b.read_more_url = cfg.read_more_url;
  b.as_of = now;
  return b;
}

// ---- JSON views ------------------------------------------------------------

inline nlohmann::ordered_json to_json(const HumanScaleReading& r) {
  return nlohmann::ordered_json{{"quantity", r.formatted},
                                {"unit", std::string(r.unit_label())},
                                {"pictogram_count", r.pictogram_count}};
}

inline nlohmann::ordered_json to_json(const PopupPayload& p) {
  return nlohmann::ordered_json{{"energy_kwh", p.energy_kwh},
                                {"water_liters", p.water_liters},
                                {"human_energy", to_json(p.human_energy)},
                                {"human_water", to_json(p.human_water)},
                                {"read_more_url", p.read_more_url},
                                {"query_count", p.query_count},
                                {"opened_at", format_instant(p.opened_at)}};
}

inline nlohmann::ordered_json to_json(const DisplayBundle& b) {
  return nlohmann::ordered_json{
      {"user_id", b.user_id},
      {"eco_score", b.eco_score},
      {"image_bracket", b.image_bracket},
      {"energy", to_json(b.energy)},
      {"water", to_json(b.water)},
      {"energy_kwh_text", b.energy_kwh_text},
      {"water_liters_text", b.water_liters_text},
      {"query_count", b.query_count},
      {"popup", b.popup ? to_json(*b.popup) : nlohmann::ordered_json(nullptr)},
      {"read_more_url", b.read_more_url},
      {"as_of", format_instant(b.as_of)},
  };
}

namespace detail {

inline nlohmann::json opt_instant(const std::optional<Instant>& t) {
  return t ? nlohmann::json(format_instant(*t)) : nlohmann::json(nullptr);
}

inline std::optional<Instant> read_opt_instant(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return parse_instant(j.get<std::string>());
}

}  // namespace detail

inline nlohmann::json user_state_to_json(const UserState& s) {
  return nlohmann::json{
      {"started", s.started},
      {"query_count", s.ledger.query_count},
      {"first_query_at", detail::opt_instant(s.ledger.first_query_at)},
      {"last_query_at", detail::opt_instant(s.ledger.last_query_at)},
      {"score", s.score.score},
      {"score_last_query_at", detail::opt_instant(s.score.last_query_at)},
      {"score_last_accrual_at", format_instant(s.score.last_accrual_at)},
      {"regen_remainder_ms", s.score.regen_remainder.count()},
      {"popup_counter", s.popup.queries_since_last_popup},
      {"popup_limit", s.popup.limit},
      {"popup_open", s.popup.popup_open},
      {"popups_fired", s.popup.popups_fired},
      {"popup_opened_at", detail::opt_instant(s.popup.last_popup_opened_at)},
      {"popup_closed_at", detail::opt_instant(s.popup.last_popup_closed_at)},
      {"popup_energy_since", s.popup.energy_since_last_popup.raw()},
      {"popup_water_since", s.popup.water_since_last_popup.raw()},
      {"open_popup_query_count", s.open_popup ? nlohmann::json(s.open_popup->query_count) : nlohmann::json(nullptr)},
  };
}

/// Totals are recomputed from the count under the current model.
inline UserState user_state_from_json(const std::string& user, const nlohmann::json& j, const ServiceConfig& cfg) {
  UserState s = transitions::pristine(user, cfg);
  s.started = j.at("started").get<bool>();
  s.ledger.query_count = j.at("query_count").get<std::int64_t>();
  s.ledger.energy_total = cfg.resources.energy_per_query * s.ledger.query_count;
  s.ledger.water_total = cfg.resources.water_per_query * s.ledger.query_count;
  s.ledger.first_query_at = detail::read_opt_instant(j.at("first_query_at"));
  s.ledger.last_query_at = detail::read_opt_instant(j.at("last_query_at"));
  s.score.score = j.at("score").get<int>();
  s.score.last_query_at = detail::read_opt_instant(j.at("score_last_query_at"));
  s.score.last_accrual_at = parse_instant(j.at("score_last_accrual_at").get<std::string>());
  s.score.regen_remainder = Millis{j.at("regen_remainder_ms").get<std::int64_t>()};
  s.popup.queries_since_last_popup = j.at("popup_counter").get<std::int64_t>();
  s.popup.limit = j.at("popup_limit").get<int>();
  s.popup.popup_open = j.at("popup_open").get<bool>();
  s.popup.popups_fired = j.at("popups_fired").get<std::int64_t>();
  s.popup.last_popup_opened_at = detail::read_opt_instant(j.at("popup_opened_at"));
  s.popup.last_popup_closed_at = detail::read_opt_instant(j.at("popup_closed_at"));
  s.popup.energy_since_last_popup = Micro::from_raw(j.at("popup_energy_since").get<std::int64_t>());
  s.popup.water_since_last_popup = Micro::from_raw(j.at("popup_water_since").get<std::int64_t>());
  // The open payload shows the totals at fire time, not the current ones.
  if (s.popup.popup_open && s.popup.last_popup_opened_at) {
    UsageLedger at_fire = s.ledger;
    if (auto it = j.find("open_popup_query_count"); it != j.end() && it->is_number_integer()) {
      at_fire.query_count = it->get<std::int64_t>();
      at_fire.energy_total = cfg.resources.energy_per_query * at_fire.query_count;
      at_fire.water_total = cfg.resources.water_per_query * at_fire.query_count;
    }
    s.open_popup = make_popup_payload(at_fire, cfg.resources, cfg.read_more_url, *s.popup.last_popup_opened_at);
  }
  return s;
}

// ---- engine ----------------------------------------------------------------

enum class UiEventKind { PopupClosed, ReadmoreClicked };

inline std::optional<UiEventKind> parse_ui_kind(std::string_view s) {
  if (s == "popup_closed") return UiEventKind::PopupClosed;
  if (s == "readmore_clicked") return UiEventKind::ReadmoreClicked;
  return std::nullopt;
}

struct IngestOutcome {
  enum class Status { Counted, NotAQuery, Duplicate, ClockSkew };
  Status status = Status::NotAQuery;
  std::optional<PopupPayload> popup;
  bool log_persisted = true;
  std::string detail;
};

struct UiOutcome {
  bool state_changed = false;
  bool log_persisted = true;
};

struct Health {
  std::uint64_t log_failures = 0;
  std::string last_error;
  std::size_t log_records = 0;
  std::size_t users = 0;
  bool ok() const { return log_failures == 0; }
};

/// Change notification for update streams.
struct Notification {
  std::string user_id;
  std::optional<PopupPayload> popup;  // set when this change opened a popup
};

/// Per-user serial event pipeline. Events for one user are applied under
/// that user's lock; different users proceed in parallel. Each applied event
/// is appended to the log before its state becomes visible, and state can be
/// rebuilt from the log alone.
class Engine {
 public:
  struct Options {
    /// Persist snapshots/idempotency keys next to a file log.
    std::optional<StorageSettings> storage;
  };

  Engine(ServiceConfig cfg, std::shared_ptr<LogSink> sink, Options opts = {})
      : cfg_(std::move(cfg)), sink_(std::move(sink)), opts_(std::move(opts)), dedup_(cfg_.idempotency_window) {}

  /// Opens (or creates) the file-backed store under cfg.storage and rebuilds
  /// state from snapshot + log tail. `extra_sink` receives every newly
  /// appended record as well (e.g. an HTTP mirror).
  static std::unique_ptr<Engine> open(const ServiceConfig& cfg, std::shared_ptr<LogSink> extra_sink = nullptr) {
    std::filesystem::create_directories(cfg.storage.dir);
    auto file = std::make_shared<JsonlFileSink>(cfg.storage.log_path(), cfg.storage.durable);
    std::shared_ptr<LogSink> sink = file;
    if (extra_sink) sink = std::make_shared<TeeSink>(file, extra_sink);
    auto engine = std::make_unique<Engine>(cfg, sink, Options{cfg.storage});
    engine->recover(read_jsonl_log(cfg.storage.log_path()));
    return engine;
  }

  const ServiceConfig& config() const { return cfg_; }

  void set_listener(std::function<void(const Notification&)> fn) {
    std::lock_guard lk(listener_mu_);
    listener_ = std::move(fn);
  }

  /// Webhook/proxy entry: dedupe, classify, then dispatch at most once.
  IngestOutcome ingest_transaction(const HttpTransactionRecord& tx, EventSource source) {
    if (tx.idempotency_key && !tx.idempotency_key->empty()) {
      if (!dedup_.admit(tx.user_id, *tx.idempotency_key, tx.observed_at)) {
        IngestOutcome out;
        out.status = IngestOutcome::Status::Duplicate;
        return out;
      }
    }
    auto ev = classify(tx, cfg_.ingest, source);
    IngestOutcome out = ev ? apply_query(*ev) : IngestOutcome{};
    // Recorded after the log row: a crash in between means a redelivery is
    // counted again rather than lost.
    if (tx.idempotency_key && !tx.idempotency_key->empty())
      persist_idempotency(tx.user_id, *tx.idempotency_key, tx.observed_at);
    return out;
  }

  IngestOutcome apply_query(const QueryEvent& ev) {
    IngestOutcome out;
    {
      std::shared_lock apply(apply_mu_);
      auto slot = slot_for(ev.user_id);
      std::lock_guard lk(slot->mu);
      UserState next = slot->state;
      try {
        out.popup = transitions::query(next, cfg_, ev.occurred_at);
      } catch (const ClockSkewError& e) {
        diag(DiagLevel::Warn, std::string("dropping out-of-order query for ") + ev.user_id + ": " + e.what());
        out.status = IngestOutcome::Status::ClockSkew;
        out.detail = e.what();
        return out;
      }
      out.log_persisted = write_log({ev.user_id, ev.occurred_at, EventType::Query});
      if (out.popup) out.log_persisted &= write_log({ev.user_id, ev.occurred_at, EventType::PopupOpening});
      slot->state = std::move(next);
      out.status = IngestOutcome::Status::Counted;
    }
    notify({ev.user_id, out.popup});
    maybe_snapshot();
    return out;
  }

  UiOutcome post_ui_event(const std::string& user, UiEventKind kind, Instant at) {
    UiOutcome out;
    {
      std::shared_lock apply(apply_mu_);
      auto slot = slot_for(user);
      std::lock_guard lk(slot->mu);
      if (kind == UiEventKind::PopupClosed) {
        UserState next = slot->state;
        out.state_changed = transitions::popup_closed(next, at);
        if (out.state_changed) {
          out.log_persisted = write_log({user, at, EventType::PopupClosed});
          slot->state = std::move(next);
        }
      } else {
        out.log_persisted = write_log({user, at, EventType::ReadmoreClicked});
      }
    }
    if (out.state_changed) notify({user, std::nullopt});
    maybe_snapshot();
    return out;
  }

  /// Read-only: accrual up to `now` is applied to a copy.
  DisplayBundle get_state(const std::string& user, Instant now) const {
    return make_bundle(user_state(user), cfg_, now);
  }

  UserState user_state(const std::string& user) const {
    std::shared_lock lk(users_mu_);
    auto it = users_.find(user);
    if (it == users_.end()) return transitions::pristine(user, cfg_);
    std::lock_guard ulk(it->second->mu);
    return it->second->state;
  }

  std::map<std::string, UserState> all_states() const {
    std::unique_lock apply(apply_mu_);
    return all_states_locked();
  }

  Health health() const {
    Health h;
    {
      std::lock_guard lk(health_mu_);
      h = health_;
    }
    h.log_records = sink_ ? sink_->size() : 0;
    std::shared_lock ulk(users_mu_);
    h.users = users_.size();
    return h;
  }

  /// Applies log rows without writing them again. popup_opening rows are
  /// derived from queries and are only cross-checked.
  void rebuild_from(const std::vector<LogRecord>& records, std::size_t begin = 0) {
    for (std::size_t i = begin; i < records.size(); ++i) {
      const auto& r = records[i];
      auto slot = slot_for(r.user_id);
      std::lock_guard lk(slot->mu);
      switch (r.event_type) {
        case EventType::Query:
          try {
            transitions::query(slot->state, cfg_, r.timestamp);
          } catch (const ClockSkewError& e) {
            diag(DiagLevel::Warn, std::string("log replay skipped out-of-order query: ") + e.what());
          }
          break;
        case EventType::PopupOpening:
          if (!slot->state.popup.popup_open)
            diag(DiagLevel::Warn, "log replay: popup_opening row without a derived popup for " + r.user_id);
          break;
        case EventType::PopupClosed:
          transitions::popup_closed(slot->state, r.timestamp);
          break;
        case EventType::ReadmoreClicked:
          break;
      }
    }
  }

  /// Writes the snapshot file (no-op without file storage).
  void snapshot() {
    if (!opts_.storage) return;
    std::unique_lock apply(apply_mu_);
    write_snapshot_locked();
  }

 private:
  class TeeSink : public LogSink {
   public:
    TeeSink(std::shared_ptr<LogSink> primary, std::shared_ptr<LogSink> mirror)
        : primary_(std::move(primary)), mirror_(std::move(mirror)) {}
    void append(const LogRecord& r) override {
      primary_->append(r);
      mirror_->append(r);
    }
    std::size_t size() const override { return primary_->size(); }

   private:
    std::shared_ptr<LogSink> primary_, mirror_;
  };

  struct Slot {
    std::mutex mu;
    UserState state;
  };

  std::shared_ptr<Slot> slot_for(const std::string& user) {
    {
      std::shared_lock lk(users_mu_);
      if (auto it = users_.find(user); it != users_.end()) return it->second;
    }
    std::unique_lock lk(users_mu_);
    auto& slot = users_[user];
    if (!slot) {
      slot = std::make_shared<Slot>();
      slot->state = transitions::pristine(user, cfg_);
    }
    return slot;
  }

  std::map<std::string, UserState> all_states_locked() const {
    std::map<std::string, UserState> out;
    std::shared_lock lk(users_mu_);
    for (const auto& [u, slot] : users_) {
      std::lock_guard ulk(slot->mu);
      out[u] = slot->state;
    }
    return out;
  }

  bool write_log(const LogRecord& r) {
    if (!sink_) return true;
    try {
      sink_->append(r);
      return true;
    } catch (const std::exception& e) {
      std::lock_guard lk(health_mu_);
      ++health_.log_failures;
      health_.last_error = e.what();
      diag(DiagLevel::Error, std::string("event log append failed: ") + e.what());
      return false;
    }
  }

  void notify(const Notification& n) {
    std::function<void(const Notification&)> fn;
    {
      std::lock_guard lk(listener_mu_);
      fn = listener_;
    }
    if (fn) fn(n);
  }

  void persist_idempotency(const std::string& user, const std::string& key, Instant at) {
    if (!opts_.storage) return;
    std::lock_guard lk(idem_mu_);
    std::ofstream out(opts_.storage->idempotency_path(), std::ios::app);
    out << nlohmann::json{{"user_id", user}, {"key", key}, {"at", format_instant(at)}}.dump() << '\n';
  }

  void load_idempotency() {
    std::ifstream in(opts_.storage->idempotency_path());
    std::string line;
    while (std::getline(in, line)) {
      try {
        auto j = nlohmann::json::parse(line);
        dedup_.admit(j.at("user_id").get<std::string>(), j.at("key").get<std::string>(),
                     parse_instant(j.at("at").get<std::string>()));
      } catch (const std::exception&) {
        // torn tail line from a crash
      }
    }
  }

  void recover(const std::vector<LogRecord>& records) {
    std::size_t begin = 0;
    if (opts_.storage && std::filesystem::exists(opts_.storage->snapshot_path())) {
      try {
        std::ifstream in(opts_.storage->snapshot_path());
        auto j = nlohmann::json::parse(in);
        auto covered = j.at("log_records").get<std::size_t>();
        if (covered <= records.size()) {
          for (const auto& [user, js] : j.at("users").items()) {
            auto slot = slot_for(user);
            slot->state = user_state_from_json(user, js, cfg_);
          }
          begin = covered;
        } else {
          diag(DiagLevel::Warn, "snapshot is ahead of the log; rebuilding from the log alone");
        }
      } catch (const std::exception& e) {
        diag(DiagLevel::Warn, std::string("ignoring unreadable snapshot: ") + e.what());
        std::unique_lock lk(users_mu_);
        users_.clear();
        begin = 0;
      }
    }
    rebuild_from(records, begin);
    if (opts_.storage) load_idempotency();
    last_snapshot_at_ = records.size();
  }

  void maybe_snapshot() {
    if (!opts_.storage || !sink_) return;
    if (sink_->size() < last_snapshot_at_ + opts_.storage->snapshot_every) return;
    std::unique_lock apply(apply_mu_);
    if (sink_->size() < last_snapshot_at_ + opts_.storage->snapshot_every) return;
    write_snapshot_locked();
  }

  void write_snapshot_locked() {
    nlohmann::json users = nlohmann::json::object();
    for (const auto& [u, s] : all_states_locked()) users[u] = user_state_to_json(s);
    std::size_t covered = sink_ ? sink_->size() : 0;
    nlohmann::json doc{{"version", 1}, {"log_records", covered}, {"users", users}};
    auto path = opts_.storage->snapshot_path();
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << doc.dump() << '\n';
      out.flush();
      if (!out) {
        diag(DiagLevel::Error, "snapshot write failed: " + tmp.string());
        return;
      }
    }
    std::filesystem::rename(tmp, path);
    last_snapshot_at_ = covered;
  }

  ServiceConfig cfg_;
  std::shared_ptr<LogSink> sink_;
  Options opts_;
  IdempotencyWindow dedup_;

  mutable std::shared_mutex apply_mu_;
  mutable std::shared_mutex users_mu_;
  std::map<std::string, std::shared_ptr<Slot>> users_;

  mutable std::mutex health_mu_;
  Health health_;
  std::mutex listener_mu_;
  std::function<void(const Notification&)> listener_;
  std::mutex idem_mu_;
  std::atomic<std::size_t> last_snapshot_at_{0};
};

}  // namespace footprint
