#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <future>
#include <thread>

#include "footprint/service.hpp"
#include "test_util.hpp"

using namespace footprint;
using namespace std::chrono;
using nlohmann::json;
using testutil::TempDir;

namespace {

ServiceConfig service_config(const TempDir& dir) {
  auto cfg = config_from_json({{"profile", "paper-figures"},
                               {"server", {{"listen", "127.0.0.1:0"}, {"stream_tick_seconds", 1}}},
                               {"storage", {{"durable", false}}}});
  cfg.storage.dir = dir.path();
  return cfg;
}

json transaction(const std::string& user, const std::string& url, int status = 200,
                 const std::string& at = "2025-01-23T09:00:00Z") {
  return {{"user_id", user}, {"method", "POST"}, {"url", url}, {"status", status}, {"observed_at", at}};
}

const std::string kConv = "https://chatgpt.com/backend-api/conversation";

template <typename Pred>
bool eventually(Pred p, milliseconds limit = milliseconds(3000)) {
  auto deadline = steady_clock::now() + limit;
  while (steady_clock::now() < deadline) {
    if (p()) return true;
    std::this_thread::sleep_for(milliseconds(10));
  }
  return p();
}

// Upstream that answers with a truncated body and hangs up.
class TruncatingUpstream {
 public:
  TruncatingUpstream() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd_, reinterpret_cast<sockaddr*>(&a), sizeof a);
    ::listen(fd_, 4);
    socklen_t len = sizeof a;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&a), &len);
    port_ = ntohs(a.sin_port);
    thread_ = std::thread([this] {
      int c = ::accept(fd_, nullptr, nullptr);
      if (c < 0) return;
      std::string got;
      char buf[4096];
      while (got.find("\r\n\r\n") == std::string::npos) {
        auto n = ::recv(c, buf, sizeof buf, 0);
        if (n <= 0) break;
        got.append(buf, static_cast<std::size_t>(n));
      }
      std::string reply = "HTTP/1.1 200 OK\r\nContent-Length: 100\r\n\r\npartial";
      ::send(c, reply.data(), reply.size(), MSG_NOSIGNAL);
      linger l{1, 0};  // RST instead of FIN
      ::setsockopt(c, SOL_SOCKET, SO_LINGER, &l, sizeof l);
      ::close(c);
    });
  }
  ~TruncatingUpstream() {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    if (thread_.joinable()) thread_.join();
  }
  int port() const { return port_; }

 private:
  int fd_ = -1;
  int port_ = 0;
  std::thread thread_;
};

int unused_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a);
  socklen_t len = sizeof a;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
  ::close(fd);
  return ntohs(a.sin_port);
}

}  // namespace

class ServiceApi : public ::testing::Test {
 protected:
  void SetUp() override {
    svc = std::make_unique<Service>(service_config(dir));
    port = svc->start();
    cli = std::make_unique<httplib::Client>("127.0.0.1", port);
  }
  void TearDown() override {
    cli.reset();
    svc.reset();
  }

  httplib::Result post(const std::string& path, const json& body) {
    return cli->Post(path, body.dump(), "application/json");
  }

  TempDir dir;
  std::unique_ptr<Service> svc;
  std::unique_ptr<httplib::Client> cli;
  int port = 0;
};

TEST_F(ServiceApi, HealthAndConfig) {
  auto h = cli->Get("/v1/healthz");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(json::parse(h->body)["status"], "ok");
  auto c = cli->Get("/v1/config");
  ASSERT_TRUE(c);
  EXPECT_EQ(json::parse(c->body)["resource"]["water_per_query_ml"], "17");
}

TEST_F(ServiceApi, FreshStateBundle) {
  auto r = cli->Get("/v1/state/user_01");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  auto j = json::parse(r->body);
  EXPECT_EQ(j["eco_score"], 100);
  EXPECT_EQ(j["energy"]["quantity"], "0.000");
  EXPECT_EQ(j["energy"]["unit"], "lightbulb-hours");
  EXPECT_TRUE(j["popup"].is_null());
  EXPECT_EQ(cli->Get("/v1/state/bad%20id")->status, 422);
}

TEST_F(ServiceApi, TransactionsCountAndPopupAtSeventh) {
  json last;
  for (int i = 0; i < 7; ++i) {
    auto r = post("/v1/events/transaction",
                  transaction("user_01", kConv, 200, "2025-01-23T09:0" + std::to_string(i) + ":00Z"));
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
    last = json::parse(r->body);
    EXPECT_TRUE(last["counted"]);
  }
  ASSERT_FALSE(last["popup"].is_null());
  EXPECT_EQ(last["popup"]["human_energy"]["quantity"], "2.030");
  EXPECT_EQ(last["popup"]["human_water"]["quantity"], "0.496");
  auto st = json::parse(cli->Get("/v1/state/user_01")->body);
  EXPECT_EQ(st["query_count"], 7);
  EXPECT_FALSE(st["popup"].is_null());

  auto ui = post("/v1/events/ui", {{"user_id", "user_01"}, {"kind", "popup_closed"}, {"at", "2025-01-23T09:07:00Z"}});
  ASSERT_EQ(ui->status, 200);
  EXPECT_TRUE(json::parse(ui->body)["state_changed"]);
  EXPECT_TRUE(json::parse(cli->Get("/v1/state/user_01")->body)["popup"].is_null());
  EXPECT_EQ(post("/v1/events/ui", {{"user_id", "user_01"}, {"kind", "closed"}})->status, 422);
}

TEST_F(ServiceApi, LegacyPathNonQueriesAndDedup) {
  auto init = post("/events/transaction", transaction("user_02", kConv + "/init"));
  EXPECT_FALSE(json::parse(init->body)["counted"]);
  auto with_key = transaction("user_02", kConv);
  with_key["idempotency_key"] = "req-1";
  EXPECT_TRUE(json::parse(post("/events/transaction", with_key)->body)["counted"]);
  auto dup = json::parse(post("/events/transaction", with_key)->body);
  EXPECT_TRUE(dup["duplicate"]);
  EXPECT_FALSE(dup["counted"]);
  EXPECT_EQ(json::parse(cli->Get("/v1/state/user_02")->body)["query_count"], 1);
}

TEST_F(ServiceApi, ValidationErrors) {
  EXPECT_EQ(cli->Post("/v1/events/transaction", "{not json", "application/json")->status, 400);
  auto missing = transaction("user_01", kConv);
  missing.erase("user_id");
  auto r = post("/v1/events/transaction", missing);
  EXPECT_EQ(r->status, 422);
  EXPECT_NE(r->body.find("user_id"), std::string::npos);
  EXPECT_EQ(post("/v1/events/transaction", transaction("user_01", kConv, 200, "yesterday"))->status, 422);
  EXPECT_EQ(post("/v1/events/transaction", transaction("user_01", kConv, 200, "2025-01-23T09:00:00Z"))->status, 200);
  EXPECT_EQ(post("/v1/events/transaction", transaction("user_01", kConv, 200, "2025-01-23T08:00:00Z"))->status, 409);
}

TEST_F(ServiceApi, StreamDeliversStateThenPopup) {
  std::promise<std::string> done;
  std::thread reader([&] {
    httplib::Client sse("127.0.0.1", port);
    sse.set_read_timeout(seconds(10));
    std::string buf;
    bool set = false;
    sse.Get("/v1/stream/user_03", [&](const char* data, std::size_t n) {
      buf.append(data, n);
      if (buf.find("event: popup") != std::string::npos && buf.rfind("\n\n") > buf.find("event: popup")) {
        done.set_value(buf);
        set = true;
        return false;
      }
      return true;
    });
    if (!set) done.set_value(buf);
  });
  ASSERT_TRUE(eventually([&] { return svc->engine().health().ok(); }));
  std::this_thread::sleep_for(milliseconds(200));
  for (int i = 0; i < 7; ++i)
    post("/v1/events/transaction", transaction("user_03", kConv, 200, "2025-01-23T10:0" + std::to_string(i) + ":00Z"));
  auto fut = done.get_future();
  ASSERT_EQ(fut.wait_for(seconds(10)), std::future_status::ready);
  auto text = fut.get();
  reader.join();
  EXPECT_EQ(text.rfind("event: state\ndata: ", 0), 0u);
  auto pos = text.find("event: popup\ndata: ");
  ASSERT_NE(pos, std::string::npos);
  auto line_end = text.find('\n', pos + 19);
  auto payload = json::parse(text.substr(pos + 19, line_end - pos - 19));
  EXPECT_EQ(payload["query_count"], 7);
  EXPECT_EQ(payload["energy_kwh"], "0.020");
}

TEST(ServiceAuth, BearerTokenRequired) {
  TempDir dir;
  auto cfg = service_config(dir);
  cfg.server.bearer_token = "tok";
  Service svc(cfg);
  httplib::Client cli("127.0.0.1", svc.start());
  EXPECT_EQ(cli.Get("/v1/state/user_01")->status, 401);
  EXPECT_EQ(cli.Get("/v1/healthz")->status, 200);
  httplib::Headers auth{{"Authorization", "Bearer tok"}};
  EXPECT_EQ(cli.Get("/v1/state/user_01", auth)->status, 200);
  auto conf = cli.Get("/v1/config", auth);
  EXPECT_EQ(conf->body.find("\"tok\""), std::string::npos);
}

TEST(ServiceAliases, ExternalIdsNeverReachTheLog) {
  TempDir dir;
  auto cfg = service_config(dir);
  cfg.storage.alias_keyfile = dir / "aliases.json";
  {
    Service svc(cfg);
    httplib::Client cli("127.0.0.1", svc.start());
    auto r = cli.Post("/v1/events/transaction", transaction("alice@example.com", kConv).dump(), "application/json");
    ASSERT_EQ(r->status, 200);
  }
  auto log = testutil::slurp(cfg.storage.log_path());
  EXPECT_EQ(log.find("alice"), std::string::npos);
  EXPECT_NE(log.find("\"user_id\":\"user_"), std::string::npos);
}

TEST(ServiceRestart, StateSurvivesRestart) {
  TempDir dir;
  auto cfg = service_config(dir);
  {
    Service svc(cfg);
    httplib::Client cli("127.0.0.1", svc.start());
    for (int i = 0; i < 9; ++i)
      cli.Post("/v1/events/transaction",
               transaction("user_01", kConv, 200, "2025-01-23T09:0" + std::to_string(i) + ":00Z").dump(),
               "application/json");
  }
  Service svc(cfg);
  httplib::Client cli("127.0.0.1", svc.start());
  EXPECT_EQ(json::parse(cli.Get("/v1/state/user_01")->body)["query_count"], 9);
}

class ProxyFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    upstream.Post("/backend-api/conversation", [this](const httplib::Request& req, httplib::Response& res) {
      seen_body = req.body;
      res.set_chunked_content_provider("text/event-stream", [this, n = std::make_shared<int>(0)](
                                                                 std::size_t, httplib::DataSink& sink) {
        if (*n == 1) {
          // hold the stream open until the client has seen the first chunk
          eventually([this] { return client_saw_first.load(); }, milliseconds(5000));
        }
        if (*n == 3) {
          sink.done();
          return true;
        }
        std::string chunk = "data: part" + std::to_string(*n) + "\n\n";
        ++*n;
        return sink.write(chunk.data(), chunk.size());
      });
    });
    upstream.Post("/backend-api/conversation/init", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{}", "application/json");
    });
    upstream.Post("/backend-api/conversation/fail", [](const httplib::Request&, httplib::Response& res) {
      res.status = 500;
      res.set_content("boom", "text/plain");
    });
    upstream_port = upstream.bind_to_any_port("127.0.0.1");
    upstream_thread = std::thread([this] { upstream.listen_after_bind(); });
    upstream.wait_until_ready();
  }

  void TearDown() override {
    svc.reset();
    upstream.stop();
    upstream_thread.join();
  }

  void start_service(int upstream_at) {
    auto cfg = service_config(dir);
    cfg.proxy.enabled = true;
    cfg.proxy.listen = HostPort{"127.0.0.1", 0};
    cfg.proxy.upstream = HostPort{"127.0.0.1", upstream_at};
    svc = std::make_unique<Service>(cfg);
    svc->start();
  }

  std::int64_t count(const std::string& user) { return svc->engine().user_state(user).ledger.query_count; }

  TempDir dir;
  httplib::Server upstream;
  int upstream_port = 0;
  std::thread upstream_thread;
  std::string seen_body;
  std::atomic<bool> client_saw_first{false};
  std::unique_ptr<Service> svc;
};

TEST_F(ProxyFixture, StreamsBodyAndRecordsOnce) {
  client_saw_first = true;  // no hold for a plain round trip
  start_service(upstream_port);
  httplib::Client cli("127.0.0.1", svc->proxy_port());
  httplib::Headers h{{"X-Footprint-User", "user_07"}};
  auto r = cli.Post("/backend-api/conversation", h, R"({"messages":["hello"]})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "data: part0\n\ndata: part1\n\ndata: part2\n\n");
  EXPECT_EQ(seen_body, R"({"messages":["hello"]})");
  EXPECT_TRUE(eventually([&] { return count("user_07") == 1; }));
}

TEST_F(ProxyFixture, FirstChunkArrivesBeforeUpstreamFinishes) {
  start_service(upstream_port);
  httplib::Client cli("127.0.0.1", svc->proxy_port());
  cli.set_read_timeout(seconds(10));
  httplib::Request req;
  req.method = "POST";
  req.path = "/backend-api/conversation";
  req.headers = {{"X-Footprint-User", "user_08"}};
  req.body = "{}";
  req.set_header("Content-Type", "application/json");
  std::string body;
  req.content_receiver = [&](const char* d, std::size_t n, std::uint64_t, std::uint64_t) {
    if (body.empty()) {
      // nothing beyond the first chunk may have been produced yet
      EXPECT_EQ(std::string(d, n).find("part1"), std::string::npos);
      client_saw_first = true;
    }
    body.append(d, n);
    return true;
  };
  auto res = cli.send(req);
  ASSERT_TRUE(res);
  EXPECT_EQ(body, "data: part0\n\ndata: part1\n\ndata: part2\n\n");
  EXPECT_TRUE(eventually([&] { return count("user_08") == 1; }));
}

TEST_F(ProxyFixture, NonQueriesPassThroughUncounted) {
  client_saw_first = true;
  start_service(upstream_port);
  httplib::Client cli("127.0.0.1", svc->proxy_port());
  httplib::Headers h{{"X-Footprint-User", "user_09"}};
  auto init = cli.Post("/backend-api/conversation/init", h, "{}", "application/json");
  ASSERT_TRUE(init);
  EXPECT_EQ(init->body, "{}");
  auto fail = cli.Post("/backend-api/conversation/fail", h, "{}", "application/json");
  ASSERT_TRUE(fail);
  EXPECT_EQ(fail->status, 500);
  EXPECT_EQ(fail->body, "boom");
  std::this_thread::sleep_for(milliseconds(100));
  EXPECT_EQ(count("user_09"), 0);
}

TEST_F(ProxyFixture, TruncatedResponseEmitsNoRecord) {
  TruncatingUpstream bad;
  start_service(bad.port());
  httplib::Client cli("127.0.0.1", svc->proxy_port());
  httplib::Headers h{{"X-Footprint-User", "user_10"}};
  auto r = cli.Post("/backend-api/conversation", h, "{}", "application/json");
  EXPECT_FALSE(r && r->body.size() == 100);
  std::this_thread::sleep_for(milliseconds(200));
  EXPECT_EQ(count("user_10"), 0);
}

TEST_F(ProxyFixture, UnreachableUpstreamIs502) {
  start_service(unused_port());
  httplib::Client cli("127.0.0.1", svc->proxy_port());
  httplib::Headers h{{"X-Footprint-User", "user_11"}};
  auto r = cli.Post("/backend-api/conversation", h, "{}", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 502);
  EXPECT_EQ(count("user_11"), 0);
}
