#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "footprint/engine.hpp"
#include "test_util.hpp"

using namespace footprint;
using namespace std::chrono;
using testutil::TempDir;

namespace {

const Instant kT0 = parse_instant("2025-01-23T08:00:00Z");

ServiceConfig figures() {
  return config_from_json({{"profile", "paper-figures"}});
}

HttpTransactionRecord conversation_post(const std::string& user, Instant at, std::optional<std::string> key = {}) {
  return {user, "POST", "https://chatgpt.com/backend-api/conversation", 200, at, std::move(key)};
}

// Drives one engine through a deterministic mixed session; returns how many
// non-derived log rows each call produced so callers can align indices.
void drive(Engine& e, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Instant t = kT0;
  for (int i = 0; i < steps; ++i) {
    t += Millis{std::uniform_int_distribution<std::int64_t>(1000, 40 * 60'000)(rng)};
    std::string user = "user_0" + std::to_string(rng() % 3);
    auto roll = rng() % 10;
    if (roll < 7)
      e.apply_query({user, t, EventSource::Replay});
    else if (roll < 9)
      e.post_ui_event(user, UiEventKind::PopupClosed, t);
    else
      e.post_ui_event(user, UiEventKind::ReadmoreClicked, t);
  }
}

}  // namespace

TEST(Engine, FreshUserBundle) {
  Engine e(figures(), std::make_shared<MemoryLogSink>());
  auto b = e.get_state("user_01", kT0);
  EXPECT_EQ(b.eco_score, 100);
  EXPECT_EQ(b.image_bracket, 1);
  EXPECT_EQ(b.energy.formatted, "0.000");
  EXPECT_EQ(b.water.formatted, "0.000");
  EXPECT_EQ(b.query_count, 0);
  EXPECT_FALSE(b.popup);
  EXPECT_EQ(e.health().users, 0u);  // reads never create users
}

TEST(Engine, ThirtyTwoAndFiftyQueryStrings) {
  Engine e(figures(), std::make_shared<MemoryLogSink>());
  for (int i = 0; i < 50; ++i) {
    e.apply_query({"user_01", kT0 + minutes(2 * i), EventSource::Webhook});
    if (i + 1 == 32) {
      auto b = e.get_state("user_01", kT0 + minutes(2 * i));
      EXPECT_EQ(b.energy.formatted, "9.280");
      EXPECT_EQ(b.water.formatted, "2.267");
    }
  }
  auto b = e.get_state("user_01", kT0 + minutes(98));
  EXPECT_EQ(b.energy.formatted, "14.500");
  EXPECT_EQ(b.water.formatted, "3.542");
  EXPECT_EQ(b.energy.pictogram_count, 14);
}

TEST(Engine, WebhookClassifiesAndDeduplicates) {
  auto sink = std::make_shared<MemoryLogSink>();
  Engine e(figures(), sink);
  EXPECT_EQ(e.ingest_transaction(conversation_post("user_01", kT0, "k1"), EventSource::Webhook).status,
            IngestOutcome::Status::Counted);
  EXPECT_EQ(e.ingest_transaction(conversation_post("user_01", kT0 + seconds(5), "k1"), EventSource::Webhook).status,
            IngestOutcome::Status::Duplicate);
  auto init = conversation_post("user_01", kT0 + seconds(6));
  init.url += "/init";
  EXPECT_EQ(e.ingest_transaction(init, EventSource::Webhook).status, IngestOutcome::Status::NotAQuery);
  EXPECT_EQ(e.user_state("user_01").ledger.query_count, 1);
  EXPECT_EQ(sink->size(), 1u);
}

TEST(Engine, ClockSkewLeavesStateUntouched) {
  auto sink = std::make_shared<MemoryLogSink>();
  Engine e(figures(), sink);
  e.apply_query({"user_01", kT0, EventSource::Webhook});
  auto before = e.user_state("user_01");
  auto out = e.apply_query({"user_01", kT0 - minutes(1), EventSource::Webhook});
  EXPECT_EQ(out.status, IngestOutcome::Status::ClockSkew);
  EXPECT_TRUE(e.user_state("user_01").same_as(before));
  EXPECT_EQ(sink->size(), 1u);
}

TEST(Engine, PopupRowsAndUiEvents) {
  auto sink = std::make_shared<MemoryLogSink>();
  Engine e(figures(), sink);
  std::vector<Notification> seen;
  e.set_listener([&](const Notification& n) { seen.push_back(n); });
  for (int i = 0; i < 7; ++i) e.apply_query({"user_01", kT0 + minutes(i), EventSource::Webhook});
  auto b = e.get_state("user_01", kT0 + minutes(6));
  ASSERT_TRUE(b.popup);
  EXPECT_EQ(b.popup->human_energy.formatted, "2.030");
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_TRUE(seen.back().popup.has_value());

  EXPECT_TRUE(e.post_ui_event("user_01", UiEventKind::PopupClosed, kT0 + minutes(7)).state_changed);
  EXPECT_FALSE(e.post_ui_event("user_01", UiEventKind::PopupClosed, kT0 + minutes(8)).state_changed);
  e.post_ui_event("user_01", UiEventKind::ReadmoreClicked, kT0 + minutes(9));
  auto rows = sink->records();
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[7].event_type, EventType::PopupOpening);
  EXPECT_EQ(rows[8].event_type, EventType::PopupClosed);
  EXPECT_EQ(rows[9].event_type, EventType::ReadmoreClicked);
  EXPECT_FALSE(e.get_state("user_01", kT0 + minutes(9)).popup);
}

TEST(Engine, GetStateIsReadOnly) {
  Engine e(figures(), std::make_shared<MemoryLogSink>());
  e.apply_query({"user_01", kT0, EventSource::Webhook});
  auto before = e.user_state("user_01");
  EXPECT_EQ(e.get_state("user_01", kT0 + hours(1)).eco_score, 96);
  EXPECT_TRUE(e.user_state("user_01").same_as(before));
  // asking about the past does not throw
  EXPECT_EQ(e.get_state("user_01", kT0 - hours(1)).eco_score, 93);
}

TEST(Engine, PerUserPopupLimit) {
  auto cfg = config_from_json({{"popup", {{"user_limits", {{"user_pilot", 3}}}}}});
  Engine e(cfg, std::make_shared<MemoryLogSink>());
  std::optional<PopupPayload> p;
  for (int i = 0; i < 3; ++i) p = e.apply_query({"user_pilot", kT0 + minutes(i), EventSource::Webhook}).popup;
  EXPECT_TRUE(p);
  for (int i = 0; i < 3; ++i) p = e.apply_query({"user_01", kT0 + minutes(i), EventSource::Webhook}).popup;
  EXPECT_FALSE(p);
}

TEST(Engine, LogWriteFailureDegradesHealthButKeepsState) {
  struct FailingSink : LogSink {
    void append(const LogRecord&) override { throw LogWriteError("disk full"); }
    std::size_t size() const override { return 0; }
  };
  Engine e(figures(), std::make_shared<FailingSink>());
  auto out = e.apply_query({"user_01", kT0, EventSource::Webhook});
  EXPECT_EQ(out.status, IngestOutcome::Status::Counted);
  EXPECT_FALSE(out.log_persisted);
  EXPECT_FALSE(e.health().ok());
  EXPECT_EQ(e.health().last_error, "disk full");
  EXPECT_EQ(e.user_state("user_01").ledger.query_count, 1);
}

TEST(Engine, RebuildFromLogEqualsLiveState) {
  auto sink = std::make_shared<MemoryLogSink>();
  Engine live(figures(), sink);
  drive(live, 400, 5);
  Engine rebuilt(figures(), nullptr);
  rebuilt.rebuild_from(sink->records());
  auto a = live.all_states(), b = rebuilt.all_states();
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [u, s] : a) EXPECT_TRUE(s.same_as(b.at(u))) << u;
}

TEST(Engine, FileStoreRecoversWithAndWithoutSnapshot) {
  TempDir dir;
  auto cfg = figures();
  cfg.storage.dir = dir.path();
  cfg.storage.snapshot_every = 37;
  cfg.storage.durable = false;
  std::map<std::string, UserState> expected;
  {
    auto e = Engine::open(cfg);
    drive(*e, 300, 9);
    expected = e->all_states();
  }
  ASSERT_TRUE(std::filesystem::exists(cfg.storage.snapshot_path()));
  auto from_snapshot = Engine::open(cfg)->all_states();
  std::filesystem::remove(cfg.storage.snapshot_path());
  auto from_log = Engine::open(cfg)->all_states();
  ASSERT_EQ(from_snapshot.size(), expected.size());
  for (const auto& [u, s] : expected) {
    EXPECT_TRUE(s.same_as(from_snapshot.at(u))) << u;
    EXPECT_TRUE(s.same_as(from_log.at(u))) << u;
  }
}

TEST(Engine, IdempotencyKeysSurviveRestart) {
  TempDir dir;
  auto cfg = figures();
  cfg.storage.dir = dir.path();
  cfg.storage.durable = false;
  {
    auto e = Engine::open(cfg);
    e->ingest_transaction(conversation_post("user_01", kT0, "abc"), EventSource::Webhook);
  }
  auto e = Engine::open(cfg);
  EXPECT_EQ(e->ingest_transaction(conversation_post("user_01", kT0 + minutes(1), "abc"), EventSource::Webhook).status,
            IngestOutcome::Status::Duplicate);
  EXPECT_EQ(e->user_state("user_01").ledger.query_count, 1);
}

TEST(Engine, ConcurrentUsersAreSerialPerUser) {
  auto sink = std::make_shared<MemoryLogSink>();
  auto cfg = figures();
  Engine e(cfg, sink);
  std::vector<std::thread> threads;
  for (int u = 0; u < 8; ++u)
    threads.emplace_back([&, u] {
      for (int i = 0; i < 200; ++i)
        e.apply_query({"user_" + std::to_string(u), kT0 + seconds(i * 30), EventSource::Webhook});
    });
  for (auto& t : threads) t.join();
  for (int u = 0; u < 8; ++u) {
    auto s = e.user_state("user_" + std::to_string(u));
    EXPECT_EQ(s.ledger.query_count, 200);
    EXPECT_EQ(s.popup.popups_fired, 200 / 7);
  }
  Engine rebuilt(cfg, nullptr);
  rebuilt.rebuild_from(sink->records());
  for (const auto& [u, s] : e.all_states()) EXPECT_TRUE(s.same_as(rebuilt.user_state(u))) << u;
}
