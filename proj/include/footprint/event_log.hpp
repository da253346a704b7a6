#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <array>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "time.hpp"

namespace footprint {

/// The four labels of the study log. Nothing else is ever written.
enum class EventType { Query, PopupOpening, PopupClosed, ReadmoreClicked };

inline constexpr std::array<EventType, 4> kEventTypes{EventType::Query, EventType::PopupOpening,
                                                      EventType::PopupClosed, EventType::ReadmoreClicked};

inline std::string_view event_label(EventType t) {
  switch (t) {
    case EventType::Query: return "query";
    case EventType::PopupOpening: return "popup_opening";
    case EventType::PopupClosed: return "popup_closed";
    case EventType::ReadmoreClicked: return "readmore_clicked";
  }
  return "?";
}

inline std::optional<EventType> parse_event_label(std::string_view s) {
  for (auto t : kEventTypes)
    if (event_label(t) == s) return t;
  return std::nullopt;
}

struct LogRecord {
  std::string user_id;
  Instant timestamp{};
  EventType event_type = EventType::Query;
  bool operator==(const LogRecord&) const = default;
};

struct LogFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LogWriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string to_jsonl(const LogRecord& r) {
  nlohmann::ordered_json j;
  j["user_id"] = r.user_id;
  j["timestamp"] = format_instant(r.timestamp);
  j["event_type"] = std::string(event_label(r.event_type));
  return j.dump();
}

inline LogRecord parse_jsonl_record(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw LogFormatError(std::string("log line is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("user_id") || !j.contains("timestamp") || !j.contains("event_type") ||
      !j["user_id"].is_string() || !j["timestamp"].is_string() || !j["event_type"].is_string())
    throw LogFormatError("log line missing user_id/timestamp/event_type: " + std::string(line));
  auto type = parse_event_label(j["event_type"].get<std::string>());
  if (!type) throw LogFormatError("unknown event_type '" + j["event_type"].get<std::string>() + "'");
  try {
    return LogRecord{j["user_id"].get<std::string>(), parse_instant(j["timestamp"].get<std::string>()), *type};
  } catch (const TimeParseError& e) {
    throw LogFormatError(e.what());
  }
}

class LogSink {
 public:
  virtual ~LogSink() = default;
  /// Appends one record; throws LogWriteError when the record could not be
  /// made durable.
  virtual void append(const LogRecord& record) = 0;
  virtual std::size_t size() const = 0;
};

class MemoryLogSink : public LogSink {
 public:
  void append(const LogRecord& record) override {
    std::lock_guard lk(mu_);
    records_.push_back(record);
  }
  std::size_t size() const override {
    std::lock_guard lk(mu_);
    return records_.size();
  }
  std::vector<LogRecord> records() const {
    std::lock_guard lk(mu_);
    return records_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<LogRecord> records_;
};

/// Append-only JSONL file. Each append is one write(2) of a full line,
/// followed by fdatasync when durable mode is on. A torn trailing line left
/// by a crash is cut off when the file is reopened.
class JsonlFileSink : public LogSink {
 public:
  explicit JsonlFileSink(std::filesystem::path path, bool durable = true) : path_(std::move(path)), durable_(durable) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    repair_tail();
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0640);
    if (fd_ < 0) throw LogWriteError("cannot open log " + path_.string() + ": " + std::strerror(errno));
    lines_ = count_lines();
  }

  JsonlFileSink(const JsonlFileSink&) = delete;
  JsonlFileSink& operator=(const JsonlFileSink&) = delete;

  ~JsonlFileSink() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void append(const LogRecord& record) override {
    std::string line = to_jsonl(record);
    line.push_back('\n');
    std::lock_guard lk(mu_);
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      ssize_t n = ::write(fd_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw LogWriteError("log append failed: " + std::string(std::strerror(errno)));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    if (durable_ && ::fdatasync(fd_) != 0)
      throw LogWriteError("log fdatasync failed: " + std::string(std::strerror(errno)));
    ++lines_;
  }

  std::size_t size() const override {
    std::lock_guard lk(mu_);
    return lines_;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void repair_tail() {
    std::error_code ec;
    if (!std::filesystem::exists(path_, ec)) return;
    auto size = std::filesystem::file_size(path_, ec);
    if (ec || size == 0) return;
    std::ifstream in(path_, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (content.back() == '\n') return;
    auto keep = content.rfind('\n');
    std::filesystem::resize_file(path_, keep == std::string::npos ? 0 : keep + 1);
  }

  std::size_t count_lines() const {
    std::ifstream in(path_);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++n;
    return n;
  }

  std::filesystem::path path_;
  bool durable_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::size_t lines_ = 0;
};

/// Reads every complete record in a JSONL log. A trailing line without a
/// newline is ignored (it never made it to disk whole).
inline std::vector<LogRecord> read_jsonl_log(const std::filesystem::path& path) {
  std::vector<LogRecord> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0;
  std::size_t lineno = 0;
  while (true) {
    auto nl = content.find('\n', start);
    if (nl == std::string::npos) break;
    ++lineno;
    std::string_view line(content.data() + start, nl - start);
    if (!line.empty()) {
      try {
        out.push_back(parse_jsonl_record(line));
      } catch (const LogFormatError& e) {
        throw LogFormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    start = nl + 1;
  }
  return out;
}

enum class ExportFormat { Csv, Jsonl };

inline ExportFormat parse_export_format(std::string_view s) {
  if (s == "csv" || s == "CSV") return ExportFormat::Csv;
  if (s == "jsonl" || s == "JSONL") return ExportFormat::Jsonl;
  throw std::invalid_argument("unknown export format '" + std::string(s) + "' (expected csv or jsonl)");
}

/// Half-open [from, to); an absent bound is unbounded.
struct TimeWindow {
  std::optional<Instant> from;
  std::optional<Instant> to;

  void validate() const {
    if (from && to && *to < *from) throw std::invalid_argument("export window: --to precedes --from");
  }
  bool contains(Instant t) const { return (!from || *from <= t) && (!to || t < *to); }
};

inline constexpr std::string_view kCsvHeader = "user_id,timestamp,event_type";

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace detail

/// Filters to the window and renders in log order. CSV always carries the
/// header, even when no rows qualify.
inline std::string export_records(const std::vector<LogRecord>& records, const TimeWindow& window, ExportFormat fmt) {
  window.validate();
  std::string out;
  if (fmt == ExportFormat::Csv) {
    out += kCsvHeader;
    out += '\n';
  }
  for (const auto& r : records) {
    if (!window.contains(r.timestamp)) continue;
    if (fmt == ExportFormat::Csv) {
      out += detail::csv_field(r.user_id) + "," + format_instant(r.timestamp) + "," +
             std::string(event_label(r.event_type)) + "\n";
    } else {
      out += to_jsonl(r) + "\n";
    }
  }
  return out;
}

inline std::vector<LogRecord> import_records(std::string_view document, ExportFormat fmt) {
  std::vector<LogRecord> out;
  std::size_t start = 0;
  bool header_seen = false;
  while (start < document.size()) {
    auto nl = document.find('\n', start);
    auto line = document.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? document.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (fmt == ExportFormat::Jsonl) {
      out.push_back(parse_jsonl_record(line));
      continue;
    }
    if (!header_seen) {
      if (line != kCsvHeader) throw LogFormatError("CSV header must be exactly " + std::string(kCsvHeader));
      header_seen = true;
      continue;
    }
    auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw LogFormatError("CSV row must have 3 columns: " + std::string(line));
    auto type = parse_event_label(f[2]);
    if (!type) throw LogFormatError("unknown event_type '" + f[2] + "'");
    try {
      out.push_back(LogRecord{f[0], parse_instant(f[1]), *type});
    } catch (const TimeParseError& e) {
      throw LogFormatError(e.what());
    }
  }
  if (fmt == ExportFormat::Csv && !header_seen) throw LogFormatError("CSV document has no header");
  return out;
}

// ---- popup dwell report ----------------------------------------------------

inline constexpr Millis kDwellBucketBoundary = std::chrono::minutes{10};

enum class DelayBucket { Under10Min, TenMinOrMore, NoLaterQuery };

inline std::string_view delay_bucket_name(DelayBucket b) {
  switch (b) {
    case DelayBucket::Under10Min: return "under_10_min";
    case DelayBucket::TenMinOrMore: return "10_min_or_more";
    case DelayBucket::NoLaterQuery: return "no_later_query";
  }
  return "?";
}

struct PopupDwell {
  std::string user_id;
  Instant opened_at{};
  std::optional<Instant> closed_at;
  std::optional<Millis> dwell;             // nullopt: never closed (incomplete)
  std::optional<Millis> next_query_delay;  // nullopt: unbounded, no later query
  DelayBucket bucket = DelayBucket::NoLaterQuery;
  bool incomplete() const { return !closed_at; }
};

struct DwellReport {
  std::vector<PopupDwell> popups;
  std::size_t under_10_min = 0;
  std::size_t ten_min_or_more = 0;
  std::size_t no_later_query = 0;
  std::size_t incomplete = 0;
  std::size_t unmatched_closes = 0;
};

/// For each popup_opening: dwell until that user's next popup_closed, and the
/// delay until the first query logged after the opening row.
inline DwellReport popup_dwell_report(const std::vector<LogRecord>& records) {
  DwellReport rep;
  std::map<std::string, std::vector<std::size_t>> open_by_user;  // indices into rep.popups awaiting close
  std::map<std::string, std::vector<std::size_t>> awaiting_query;
  for (const auto& r : records) {
    switch (r.event_type) {
      case EventType::PopupOpening: {
        rep.popups.push_back(PopupDwell{r.user_id, r.timestamp, {}, {}, {}, DelayBucket::NoLaterQuery});
        open_by_user[r.user_id].push_back(rep.popups.size() - 1);
        awaiting_query[r.user_id].push_back(rep.popups.size() - 1);
        break;
      }
      case EventType::PopupClosed: {
        auto& pending = open_by_user[r.user_id];
        if (pending.empty()) {
          ++rep.unmatched_closes;
          break;
        }
        // One close dismisses every popup that was refreshed while open.
        for (auto idx : pending) {
          rep.popups[idx].closed_at = r.timestamp;
          rep.popups[idx].dwell = r.timestamp - rep.popups[idx].opened_at;
        }
        pending.clear();
        break;
      }
      case EventType::Query: {
        auto& waiting = awaiting_query[r.user_id];
        for (auto idx : waiting) {
          auto delay = r.timestamp - rep.popups[idx].opened_at;
          rep.popups[idx].next_query_delay = delay;
          rep.popups[idx].bucket = delay < kDwellBucketBoundary ? DelayBucket::Under10Min : DelayBucket::TenMinOrMore;
        }
        waiting.clear();
        break;
      }
      case EventType::ReadmoreClicked:
        break;
    }
  }
  for (const auto& p : rep.popups) {
    if (p.incomplete()) ++rep.incomplete;
    switch (p.bucket) {
      case DelayBucket::Under10Min: ++rep.under_10_min; break;
      case DelayBucket::TenMinOrMore: ++rep.ten_min_or_more; break;
      case DelayBucket::NoLaterQuery: ++rep.no_later_query; break;
    }
  }
  return rep;
}

// ---- pseudonymous aliases --------------------------------------------------

/// Maps external identities to random aliases ("user_" + 16 hex digits).
/// The mapping only ever lives in the keyfile; logs see aliases alone.
class AliasRegistry {
 public:
  explicit AliasRegistry(std::optional<std::filesystem::path> keyfile = std::nullopt) : keyfile_(std::move(keyfile)) {
    if (keyfile_ && std::filesystem::exists(*keyfile_)) {
      std::ifstream in(*keyfile_);
      auto j = nlohmann::json::parse(in);
      if (!j.is_object()) throw std::runtime_error("alias keyfile must hold a JSON object");
      for (auto& [k, v] : j.items()) {
        map_[k] = v.get<std::string>();
        used_.insert({v.get<std::string>(), k});
      }
    }
  }

  bool enabled() const { return keyfile_.has_value(); }

  /// Without a keyfile, identifiers pass through and must already look like
  /// pseudonyms.
  std::string resolve(const std::string& external_id) {
    if (!enabled()) {
      if (!is_valid_alias(external_id))
        throw std::invalid_argument("user_id '" + external_id +
                                    "' is not a pseudonymous id ([A-Za-z0-9_.-]{1,64}); configure an alias keyfile");
      return external_id;
    }
    std::lock_guard lk(mu_);
    if (auto it = map_.find(external_id); it != map_.end()) return it->second;
    std::string alias;
    do {
      alias = random_alias();
    } while (used_.count(alias));
    map_[external_id] = alias;
    used_.insert({alias, external_id});
    persist();
    return alias;
  }

  static bool is_valid_alias(std::string_view s) {
    if (s.empty() || s.size() > 64) return false;
    for (char c : s)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
    return true;
  }

 private:
  static std::string random_alias() {
    std::random_device rd;  // getrandom(2)-backed on Linux
    std::uint64_t v = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    char buf[32];
    std::snprintf(buf, sizeof buf, "user_%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

  void persist() {
    nlohmann::json j = map_;
    auto tmp = *keyfile_;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << j.dump(2) << '\n';
      if (!out) throw std::runtime_error("cannot write alias keyfile " + tmp.string());
    }
    std::filesystem::rename(tmp, *keyfile_);
    ::chmod(keyfile_->c_str(), 0600);
  }

  std::optional<std::filesystem::path> keyfile_;
  std::mutex mu_;
  std::map<std::string, std::string> map_;
  std::map<std::string, std::string> used_;
};

}  // namespace footprint
