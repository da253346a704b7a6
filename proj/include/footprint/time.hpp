#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace footprint {

using Millis = std::chrono::milliseconds;
using Instant = std::chrono::sys_time<Millis>;

struct TimeParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool take_digits(std::string_view s, std::size_t& pos, std::size_t n, int& out) {
  if (pos + n > s.size()) return false;
  int v = 0;
  for (std::size_t i = 0; i < n; ++i) {
    char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  pos += n;
  return true;
}

inline bool take_char(std::string_view s, std::size_t& pos, char c) {
  if (pos < s.size() && s[pos] == c) {
    ++pos;
    return true;
  }
  return false;
}

}  // namespace detail

/// Parses an ISO-8601 instant of the form YYYY-MM-DDTHH:MM:SS[.fff...](Z|±HH:MM).
/// A zone designator is mandatory; offsets are folded into UTC. Sub-millisecond
/// digits are truncated.
inline Instant parse_instant(std::string_view text) {
  using namespace std::chrono;
  std::size_t p = 0;
  int y, mo, d, h, mi, s;
  auto fail = [&](const char* what) {
    return TimeParseError(std::string("invalid ISO-8601 instant '") + std::string(text) + "': " + what);
  };
  if (!detail::take_digits(text, p, 4, y) || !detail::take_char(text, p, '-') ||
      !detail::take_digits(text, p, 2, mo) || !detail::take_char(text, p, '-') ||
      !detail::take_digits(text, p, 2, d))
    throw fail("bad date");
  if (!(detail::take_char(text, p, 'T') || detail::take_char(text, p, 't') || detail::take_char(text, p, ' ')))
    throw fail("missing time");
  if (!detail::take_digits(text, p, 2, h) || !detail::take_char(text, p, ':') ||
      !detail::take_digits(text, p, 2, mi) || !detail::take_char(text, p, ':') ||
      !detail::take_digits(text, p, 2, s))
    throw fail("bad time");
  std::int64_t frac_ms = 0;
  if (detail::take_char(text, p, '.') || detail::take_char(text, p, ',')) {
    int digits = 0;
    while (p < text.size() && text[p] >= '0' && text[p] <= '9') {
      if (digits < 3) frac_ms = frac_ms * 10 + (text[p] - '0');
      ++digits;
      ++p;
    }
    if (digits == 0) throw fail("empty fraction");
    for (int i = digits; i < 3; ++i) frac_ms *= 10;
  }
  int offset_min = 0;
  if (detail::take_char(text, p, 'Z') || detail::take_char(text, p, 'z')) {
  } else if (p < text.size() && (text[p] == '+' || text[p] == '-')) {
    int sign = text[p] == '-' ? -1 : 1;
    ++p;
    int oh, om;
    if (!detail::take_digits(text, p, 2, oh)) throw fail("bad offset");
    detail::take_char(text, p, ':');
    if (!detail::take_digits(text, p, 2, om)) throw fail("bad offset");
    if (oh > 23 || om > 59) throw fail("bad offset");
    offset_min = sign * (oh * 60 + om);
  } else {
    throw fail("missing zone designator");
  }
  if (p != text.size()) throw fail("trailing characters");

  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw fail("no such date");
  if (h > 23 || mi > 59 || s > 60) throw fail("time out of range");
  auto t = sys_days{ymd} + hours{h} + minutes{mi} + seconds{s} + Millis{frac_ms};
  return t - minutes{offset_min};
}

inline std::optional<Instant> try_parse_instant(std::string_view text) {
  try {
    return parse_instant(text);
  } catch (const TimeParseError&) {
    return std::nullopt;
  }
}

/// Renders YYYY-MM-DDTHH:MM:SS.mmmZ.
inline std::string format_instant(Instant t) {
  using namespace std::chrono;
  auto day_point = floor<days>(t);
  year_month_day ymd{day_point};
  hh_mm_ss<Millis> tod{t - day_point};
  char buf[40];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(tod.hours().count()), static_cast<int>(tod.minutes().count()),
                static_cast<int>(tod.seconds().count()), static_cast<int>(tod.subseconds().count()));
  return buf;
}

/// Calendar date YYYY-MM-DD anchored at 00:00:00 UTC.
inline std::chrono::sys_days parse_date(std::string_view text) {
  using namespace std::chrono;
  std::size_t p = 0;
  int y, mo, d;
  if (!detail::take_digits(text, p, 4, y) || !detail::take_char(text, p, '-') ||
      !detail::take_digits(text, p, 2, mo) || !detail::take_char(text, p, '-') ||
      !detail::take_digits(text, p, 2, d) || p != text.size())
    throw TimeParseError("invalid date '" + std::string(text) + "', expected YYYY-MM-DD");
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw TimeParseError("no such date '" + std::string(text) + "'");
  return sys_days{ymd};
}

inline Instant now_utc() { return std::chrono::floor<Millis>(std::chrono::system_clock::now()); }

}  // namespace footprint
