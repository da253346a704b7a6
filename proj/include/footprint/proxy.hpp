#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "config.hpp"
#include "diag.hpp"
#include "ingest.hpp"
#include "time.hpp"

namespace footprint {

namespace net {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void set_timeouts(int fd, std::chrono::seconds t) {
  timeval tv{static_cast<time_t>(t.count()), 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

inline Fd connect_to(const std::string& host, int port, std::chrono::seconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0) return Fd{};
  Fd out;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    Fd s(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!s) continue;
    set_timeouts(s.get(), timeout);
    if (::connect(s.get(), ai->ai_addr, ai->ai_addrlen) == 0) {
      int one = 1;
      ::setsockopt(s.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      out = std::move(s);
      break;
    }
  }
  ::freeaddrinfo(res);
  return out;
}

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

/// Buffered reader over a socket. Head parsing uses read_line; bodies are
/// moved with relay_* without ever being interpreted.
class Reader {
 public:
  explicit Reader(int fd) : fd_(fd) {}

  /// One CRLF-terminated line without the terminator; nullopt on EOF/error.
  std::optional<std::string> read_line(std::size_t limit = 64 * 1024) {
    while (true) {
      auto pos = buf_.find("\r\n", off_);
      if (pos != std::string::npos) {
        std::string line = buf_.substr(off_, pos - off_);
        off_ = pos + 2;
        return line;
      }
      if (buf_.size() - off_ > limit) return std::nullopt;
      if (!fill()) return std::nullopt;
    }
  }

  /// Copies exactly n bytes to `out`.
  bool relay_exact(std::size_t n, int out) {
    while (n > 0) {
      if (off_ == buf_.size() && !fill()) return false;
      std::size_t take = std::min(n, buf_.size() - off_);
      if (!send_all(out, std::string_view(buf_).substr(off_, take))) return false;
      off_ += take;
      n -= take;
      compact();
    }
    return true;
  }

  /// Copies until the peer closes cleanly. Returns false on reset.
  bool relay_until_eof(int out) {
    while (true) {
      if (off_ < buf_.size()) {
        if (!send_all(out, std::string_view(buf_).substr(off_))) return false;
        off_ = buf_.size();
        compact();
      }
      ssize_t n = read_some();
      if (n == 0) return true;
      if (n < 0) return false;
    }
  }

  /// Chunked transfer framing: sizes and trailers are parsed, chunk payloads
  /// are copied through opaquely.
  bool relay_chunked(int out) {
    while (true) {
      auto line = read_line();
      if (!line) return false;
      if (!send_all(out, *line + "\r\n")) return false;
      auto semi = line->find(';');
      std::string hex = line->substr(0, semi);
      while (!hex.empty() && (hex.back() == ' ' || hex.back() == '\t')) hex.pop_back();
      if (hex.empty()) return false;
      std::size_t size = 0;
      for (char c : hex) {
        int v = std::isdigit(static_cast<unsigned char>(c)) ? c - '0'
                : (c >= 'a' && c <= 'f')                    ? c - 'a' + 10
                : (c >= 'A' && c <= 'F')                    ? c - 'A' + 10
                                                            : -1;
        if (v < 0) return false;
        size = size * 16 + static_cast<std::size_t>(v);
      }
      if (size == 0) {
        while (true) {
          auto trailer = read_line();
          if (!trailer) return false;
          if (!send_all(out, *trailer + "\r\n")) return false;
          if (trailer->empty()) return true;
        }
      }
      if (!relay_exact(size + 2, out)) return false;
    }
  }

 private:
  bool fill() { return read_some() > 0; }

  ssize_t read_some() {
    char tmp[16 * 1024];
    while (true) {
      ssize_t n = ::recv(fd_, tmp, sizeof tmp, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n > 0) buf_.append(tmp, static_cast<std::size_t>(n));
      return n;
    }
  }

  void compact() {
    if (off_ > 0 && off_ == buf_.size()) {
      buf_.clear();
      off_ = 0;
    }
  }

  int fd_;
  std::string buf_;
  std::size_t off_ = 0;
};

struct MessageHead {
  std::string start_line;
  std::vector<std::pair<std::string, std::string>> headers;

  std::optional<std::string> header(std::string_view name) const {
    for (const auto& [k, v] : headers)
      if (k.size() == name.size() &&
          std::equal(k.begin(), k.end(), name.begin(), [](char a, char b) { return std::tolower(a) == std::tolower(b); }))
        return v;
    return std::nullopt;
  }

  void erase(std::string_view name) {
    headers.erase(std::remove_if(headers.begin(), headers.end(),
                                 [&](const auto& h) {
                                   return h.first.size() == name.size() &&
                                          std::equal(h.first.begin(), h.first.end(), name.begin(), [](char a, char b) {
                                            return std::tolower(a) == std::tolower(b);
                                          });
                                 }),
                  headers.end());
  }

  std::string serialize() const {
    std::string s = start_line + "\r\n";
    for (const auto& [k, v] : headers) s += k + ": " + v + "\r\n";
    return s + "\r\n";
  }
};

inline std::optional<MessageHead> read_head(Reader& r) {
  MessageHead h;
  auto first = r.read_line();
  if (!first) return std::nullopt;
  h.start_line = *first;
  std::size_t total = first->size();
  while (true) {
    auto line = r.read_line();
    if (!line) return std::nullopt;
    if (line->empty()) break;
    total += line->size();
    if (total > 64 * 1024) return std::nullopt;
    auto colon = line->find(':');
    if (colon == std::string::npos) return std::nullopt;
    std::string value = line->substr(colon + 1);
    auto b = value.find_first_not_of(" \t");
    auto e = value.find_last_not_of(" \t");
    value = b == std::string::npos ? "" : value.substr(b, e - b + 1);
    h.headers.emplace_back(line->substr(0, colon), value);
  }
  return h;
}

inline bool is_chunked(const MessageHead& h) {
  auto te = h.header("Transfer-Encoding");
  if (!te) return false;
  std::string v = *te;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  return v.find("chunked") != std::string::npos;
}

inline std::optional<std::size_t> content_length(const MessageHead& h) {
  auto cl = h.header("Content-Length");
  if (!cl) return std::nullopt;
  try {
    return static_cast<std::size_t>(std::stoull(*cl));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace net

/// Local reverse proxy that forwards every exchange to one upstream and
/// reports each completed request/response pair as an HttpTransactionRecord.
/// One exchange per client connection (Connection: close on both legs).
class ReverseProxy {
 public:
  using RecordFn = std::function<void(const HttpTransactionRecord&)>;

  ReverseProxy(ProxySettings settings, RecordFn on_record)
      : settings_(std::move(settings)), on_record_(std::move(on_record)) {}

  ReverseProxy(const ReverseProxy&) = delete;
  ReverseProxy& operator=(const ReverseProxy&) = delete;
  ~ReverseProxy() { stop(); }

  /// Binds and starts accepting. Returns the bound port (useful with port 0).
  int start() {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    if (::getaddrinfo(settings_.listen.host.c_str(), std::to_string(settings_.listen.port).c_str(), &hints, &res) != 0)
      throw std::runtime_error("proxy: cannot resolve listen address " + settings_.listen.to_string());
    for (auto* ai = res; ai; ai = ai->ai_next) {
      net::Fd s(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
      if (!s) continue;
      int one = 1;
      ::setsockopt(s.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(s.get(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.get(), 128) == 0) {
        listen_ = std::move(s);
        break;
      }
    }
    ::freeaddrinfo(res);
    if (!listen_) throw std::runtime_error("proxy: cannot listen on " + settings_.listen.to_string());
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(listen_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                       : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    if (acceptor_.joinable()) acceptor_.join();
    listen_.reset();
    std::unique_lock lk(active_mu_);
    // handlers run detached and use this object, so unblock them and wait them all out
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    active_cv_.wait(lk, [&] { return active_ == 0; });
  }

  int port() const { return port_; }

 private:
  void accept_loop() {
    while (running_) {
      pollfd p{listen_.get(), POLLIN, 0};
      int rc = ::poll(&p, 1, 100);
      if (rc <= 0) continue;
      int c = ::accept4(listen_.get(), nullptr, nullptr, SOCK_CLOEXEC);
      if (c < 0) continue;
      {
        std::lock_guard lk(active_mu_);
        ++active_;
      }
      std::thread([this, c] {
        handle(net::Fd(c));
        std::lock_guard lk(active_mu_);
        --active_;
        active_cv_.notify_all();
      }).detach();
    }
  }

  static void reply_error(int fd, int status, std::string_view reason) {
    std::string body = std::to_string(status) + " " + std::string(reason) + "\n";
    net::send_all(fd, "HTTP/1.1 " + std::to_string(status) + " " + std::string(reason) +
                          "\r\nContent-Type: text/plain\r\nContent-Length: " + std::to_string(body.size()) +
                          "\r\nConnection: close\r\n\r\n" + body);
  }

  class Tracked {
   public:
    Tracked(ReverseProxy& p, int fd) : p_(p), fd_(fd) {
      std::lock_guard lk(p_.active_mu_);
      p_.open_fds_.insert(fd_);
      if (!p_.running_) ::shutdown(fd_, SHUT_RDWR);
    }
    ~Tracked() {
      std::lock_guard lk(p_.active_mu_);
      p_.open_fds_.erase(fd_);
    }
    Tracked(const Tracked&) = delete;
    Tracked& operator=(const Tracked&) = delete;

   private:
    ReverseProxy& p_;
    int fd_;
  };

  void handle(net::Fd client) {
    Tracked client_guard(*this, client.get());
    net::set_timeouts(client.get(), timeout_);
    net::Reader from_client(client.get());
    auto req = net::read_head(from_client);
    if (!req) return;

    std::string method, target;
    {
      auto sp1 = req->start_line.find(' ');
      auto sp2 = req->start_line.find(' ', sp1 == std::string::npos ? 0 : sp1 + 1);
      if (sp1 == std::string::npos || sp2 == std::string::npos) {
        reply_error(client.get(), 400, "Bad Request");
        return;
      }
      method = req->start_line.substr(0, sp1);
      target = req->start_line.substr(sp1 + 1, sp2 - sp1 - 1);
    }

    std::string user = req->header(settings_.user_header).value_or(settings_.default_user);
    req->erase(settings_.user_header);
    std::string url = absolute_url(*req, target);

    auto upstream = net::connect_to(settings_.upstream.host, settings_.upstream.port, timeout_);
    if (!upstream) {
      diag(DiagLevel::Warn, "proxy: upstream " + settings_.upstream.to_string() + " unreachable");
      reply_error(client.get(), 502, "Bad Gateway");
      return;
    }
    Tracked upstream_guard(*this, upstream.get());
    req->erase("Connection");
    req->erase("Proxy-Connection");
    req->erase("Keep-Alive");
    req->headers.emplace_back("Connection", "close");
    if (!net::send_all(upstream.get(), req->serialize())) {
      reply_error(client.get(), 502, "Bad Gateway");
      return;
    }
    bool req_ok = true;
    if (net::is_chunked(*req))
      req_ok = from_client.relay_chunked(upstream.get());
    else if (auto n = net::content_length(*req); n && *n > 0)
      req_ok = from_client.relay_exact(*n, upstream.get());
    if (!req_ok) return;

    net::Reader from_upstream(upstream.get());
    auto resp = net::read_head(from_upstream);
    if (!resp) {
      reply_error(client.get(), 502, "Bad Gateway");
      return;
    }
    int status = parse_status(resp->start_line);
    if (status <= 0) {
      reply_error(client.get(), 502, "Bad Gateway");
      return;
    }
    resp->erase("Connection");
    resp->erase("Keep-Alive");
    resp->headers.emplace_back("Connection", "close");
    if (!net::send_all(client.get(), resp->serialize())) return;

    bool body_ok = true;
    bool no_body = method == "HEAD" || status / 100 == 1 || status == 204 || status == 304;
    if (!no_body) {
      if (net::is_chunked(*resp))
        body_ok = from_upstream.relay_chunked(client.get());
      else if (auto n = net::content_length(*resp))
        body_ok = from_upstream.relay_exact(*n, client.get());
      else
        body_ok = from_upstream.relay_until_eof(client.get());
    }
    if (!body_ok) {
      diag(DiagLevel::Info, "proxy: exchange for " + url + " ended before completion; no record");
      return;
    }
    if (on_record_) on_record_(HttpTransactionRecord{user, method, url, status, now_utc(), std::nullopt});
  }

  std::string absolute_url(const net::MessageHead& req, const std::string& target) const {
    if (target.find("://") != std::string::npos) return target;
    if (!settings_.public_origin.empty()) return settings_.public_origin + target;
    return "http://" + req.header("Host").value_or(settings_.upstream.to_string()) + target;
  }

  static int parse_status(const std::string& line) {
    auto sp = line.find(' ');
    if (sp == std::string::npos || line.compare(0, 5, "HTTP/") != 0) return -1;
    try {
      return std::stoi(line.substr(sp + 1, 3));
    } catch (const std::exception&) {
      return -1;
    }
  }

  ProxySettings settings_;
  RecordFn on_record_;
  std::chrono::seconds timeout_{60};
  net::Fd listen_;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex active_mu_;
  std::condition_variable active_cv_;
  int active_ = 0;
  std::set<int> open_fds_;
};

}  // namespace footprint
