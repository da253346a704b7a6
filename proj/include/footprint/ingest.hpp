#pragma once

#include <chrono>
#include <cctype>
#include <concepts>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diag.hpp"
#include "time.hpp"

namespace footprint {

/// What the classifier sees of one completed HTTP exchange. There is no body
/// field: detection works from method, URL and status only.
struct HttpTransactionRecord {
  std::string user_id;
  std::string method;
  std::string url;
  int status = 0;
  Instant observed_at{};
  std::optional<std::string> idempotency_key;
};

enum class EventSource { Proxy, Webhook, Replay };

inline std::string_view source_name(EventSource s) {
  switch (s) {
    case EventSource::Proxy: return "proxy";
    case EventSource::Webhook: return "webhook";
    case EventSource::Replay: return "replay";
  }
  return "?";
}

struct QueryEvent {
  std::string user_id;
  Instant occurred_at{};
  EventSource source = EventSource::Webhook;
  bool operator==(const QueryEvent&) const = default;
};

struct IngestRules {
  std::string api_path_prefix = "/backend-api/conversation";
  std::vector<std::string> ignore_substrings{"init", "implicit"};
  std::string method = "POST";
  int status = 200;
};

struct UrlParts {
  std::string scheme;
  std::string authority;
  std::string path;
  std::string query;
};

/// Splits an absolute URL. Returns nullopt for anything that is not
/// scheme://authority[/path][?query][#fragment].
inline std::optional<UrlParts> split_url(std::string_view url) {
  auto sep = url.find("://");
  if (sep == std::string_view::npos || sep == 0) return std::nullopt;
  UrlParts parts;
  parts.scheme = std::string(url.substr(0, sep));
  for (char c : parts.scheme)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '-' || c == '.')) return std::nullopt;
  auto rest = url.substr(sep + 3);
  auto auth_end = rest.find_first_of("/?#");
  parts.authority = std::string(rest.substr(0, auth_end));
  if (parts.authority.empty()) return std::nullopt;
  for (char c : parts.authority)
    if (std::isspace(static_cast<unsigned char>(c))) return std::nullopt;
  if (auth_end == std::string_view::npos) {
    parts.path = "/";
    return parts;
  }
  rest = rest.substr(auth_end);
  auto frag = rest.find('#');
  if (frag != std::string_view::npos) rest = rest.substr(0, frag);
  auto q = rest.find('?');
  parts.path = std::string(rest.substr(0, q));
  if (q != std::string_view::npos) parts.query = std::string(rest.substr(q + 1));
  if (parts.path.empty()) parts.path = "/";
  return parts;
}

/// Anything exposing the record's header-level fields can be classified.
template <typename T>
concept TransactionLike = requires(const T& t) {
  { t.user_id } -> std::convertible_to<std::string_view>;
  { t.method } -> std::convertible_to<std::string_view>;
  { t.url } -> std::convertible_to<std::string_view>;
  { t.status } -> std::convertible_to<int>;
  { t.observed_at } -> std::convertible_to<Instant>;
};

/// A transaction is a billable query iff it is a POST answered 200 on the
/// configured API path and its URL contains none of the ignore substrings
/// (case-sensitive, whole URL text).
template <TransactionLike Tx>
std::optional<QueryEvent> classify(const Tx& tx, const IngestRules& rules = {},
                                   EventSource source = EventSource::Webhook) {
  if (std::string_view(tx.method) != rules.method) return std::nullopt;
  if (static_cast<int>(tx.status) != rules.status) return std::nullopt;
  std::string_view url = tx.url;
  auto parts = split_url(url);
  if (!parts) {
    diag(DiagLevel::Debug, "classify: malformed URL treated as non-query: " + std::string(url));
    return std::nullopt;
  }
  if (!std::string_view(parts->path).starts_with(rules.api_path_prefix)) return std::nullopt;
  for (const auto& s : rules.ignore_substrings)
    if (!s.empty() && url.find(s) != std::string_view::npos) return std::nullopt;
  return QueryEvent{std::string(std::string_view(tx.user_id)), static_cast<Instant>(tx.observed_at), source};
}

/// Remembers client-supplied idempotency keys for a sliding window.
class IdempotencyWindow {
 public:
  explicit IdempotencyWindow(Millis window = std::chrono::hours{24}) : window_(window) {}

  /// Returns true the first time (user, key) is seen inside the window.
  bool admit(const std::string& user_id, const std::string& key, Instant at) {
    std::lock_guard lk(mu_);
    expire(at);
    auto composite = user_id + '\x1f' + key;
    auto [it, inserted] = seen_.try_emplace(composite, at);
    if (!inserted) return false;
    order_.push_back({at, composite});
    return true;
  }

  bool contains(const std::string& user_id, const std::string& key) const {
    std::lock_guard lk(mu_);
    return seen_.count(user_id + '\x1f' + key) > 0;
  }

  struct Entry {
    std::string user_id;
    std::string key;
    Instant at;
  };

  std::vector<Entry> entries() const {
    std::lock_guard lk(mu_);
    std::vector<Entry> out;
    for (const auto& [at, composite] : order_) {
      auto sep = composite.find('\x1f');
      out.push_back({composite.substr(0, sep), composite.substr(sep + 1), at});
    }
    return out;
  }

  Millis window() const { return window_; }

 private:
  void expire(Instant now) {
    while (!order_.empty() && order_.front().first + window_ <= now) {
      auto it = seen_.find(order_.front().second);
      if (it != seen_.end() && it->second == order_.front().first) seen_.erase(it);
      order_.pop_front();
    }
  }

  Millis window_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Instant> seen_;
  std::deque<std::pair<Instant, std::string>> order_;
};

}  // namespace footprint
