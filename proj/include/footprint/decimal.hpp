#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>

namespace footprint {

using i128 = __int128;

/// Non-negative-friendly fixed-point decimal with six fractional digits.
/// All resource arithmetic runs on these so formatted strings never depend on
/// floating-point rounding.
class Micro {
 public:
  static constexpr std::int64_t kScale = 1'000'000;

  constexpr Micro() = default;
  static constexpr Micro from_raw(std::int64_t raw) { return Micro{raw}; }
  static constexpr Micro from_int(std::int64_t whole) { return Micro{whole * kScale}; }

  /// Exact parse of a decimal literal such as "2.9" or "16.90". More than six
  /// fractional digits is an error rather than a silent rounding.
  static Micro parse(std::string_view text) {
    if (text.empty()) throw std::invalid_argument("empty decimal");
    std::size_t p = 0;
    bool neg = false;
    if (text[0] == '-' || text[0] == '+') {
      neg = text[0] == '-';
      ++p;
    }
    std::int64_t whole = 0, frac = 0;
    int frac_digits = 0;
    bool any = false;
    for (; p < text.size() && text[p] != '.'; ++p) {
      char c = text[p];
      if (c < '0' || c > '9') throw std::invalid_argument("bad decimal '" + std::string(text) + "'");
      whole = whole * 10 + (c - '0');
      if (whole > 9'000'000'000'000) throw std::invalid_argument("decimal out of range");
      any = true;
    }
    if (p < text.size()) {
      ++p;
      for (; p < text.size(); ++p) {
        char c = text[p];
        if (c < '0' || c > '9') throw std::invalid_argument("bad decimal '" + std::string(text) + "'");
        if (++frac_digits > 6) throw std::invalid_argument("more than 6 decimal places in '" + std::string(text) + "'");
        frac = frac * 10 + (c - '0');
        any = true;
      }
    }
    if (!any) throw std::invalid_argument("bad decimal '" + std::string(text) + "'");
    for (int i = frac_digits; i < 6; ++i) frac *= 10;
    std::int64_t raw = whole * kScale + frac;
    return Micro{neg ? -raw : raw};
  }

  /// Accepts a binary double only when it sits on the micro grid (JSON numbers).
  static Micro from_double(double v) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite decimal");
    double scaled = v * static_cast<double>(kScale);
    double r = std::nearbyint(scaled);
    if (std::fabs(scaled - r) > 1e-6 * std::fmax(1.0, std::fabs(scaled)))
      throw std::invalid_argument("more than 6 decimal places in " + std::to_string(v));
    return Micro{static_cast<std::int64_t>(r)};
  }

  constexpr std::int64_t raw() const { return raw_; }
  double to_double() const { return static_cast<double>(raw_) / kScale; }

  std::string to_string() const {
    std::int64_t a = raw_ < 0 ? -raw_ : raw_;
    std::string s = (raw_ < 0 ? "-" : "") + std::to_string(a / kScale);
    std::int64_t f = a % kScale;
    if (f != 0) {
      std::string digits = std::to_string(f);
      digits.insert(0, 6 - digits.size(), '0');
      while (digits.back() == '0') digits.pop_back();
      s += "." + digits;
    }
    return s;
  }

  constexpr Micro operator+(Micro o) const { return Micro{raw_ + o.raw_}; }
  constexpr Micro operator-(Micro o) const { return Micro{raw_ - o.raw_}; }
  constexpr Micro operator*(std::int64_t n) const { return Micro{raw_ * n}; }
  constexpr Micro& operator+=(Micro o) {
    raw_ += o.raw_;
    return *this;
  }
  constexpr auto operator<=>(const Micro&) const = default;

 private:
  constexpr explicit Micro(std::int64_t raw) : raw_(raw) {}
  std::int64_t raw_ = 0;
};

/// Exact non-negative quotient num/den, used for human-scale quantities.
struct Ratio {
  i128 num = 0;
  i128 den = 1;

  std::int64_t floor() const { return static_cast<std::int64_t>(num / den); }
  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

  friend bool operator<(const Ratio& a, const Ratio& b) { return a.num * b.den < b.num * a.den; }
  friend bool operator==(const Ratio& a, const Ratio& b) { return a.num * b.den == b.num * a.den; }
};

namespace detail {

inline std::string i128_to_string(i128 v) {
  if (v == 0) return "0";
  bool neg = v < 0;
  if (neg) v = -v;
  std::string s;
  while (v > 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return neg ? "-" + s : s;
}

}  // namespace detail

/// Three decimals, half away from zero, computed on the exact quotient.
inline std::string format_metric(const Ratio& value) {
  if (value.den <= 0) throw std::invalid_argument("format_metric: non-positive denominator");
  bool neg = value.num < 0;
  i128 n = neg ? -value.num : value.num;
  i128 thousandths = (2 * n * 1000 + value.den) / (2 * value.den);
  std::string whole = detail::i128_to_string(thousandths / 1000);
  std::string frac = detail::i128_to_string(thousandths % 1000);
  frac.insert(0, 3 - frac.size(), '0');
  return (neg && thousandths != 0 ? "-" : "") + whole + "." + frac;
}

inline std::string format_metric(Micro value) { return format_metric(Ratio{value.raw(), Micro::kScale}); }

/// Decimal input given as a double. Routed through the shortest round-trip
/// decimal text so 0.2125 formats as the literal it was written as.
inline std::string format_metric(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("format_metric: non-finite value");
  if (std::fabs(value) >= 1e15) throw std::invalid_argument("format_metric: value out of range");
  if (std::fabs(value) < 1e-9) return "0.000";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  // Find the shortest representation that round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char trial[64];
    std::snprintf(trial, sizeof trial, "%.*g", prec, value);
    if (std::strtod(trial, nullptr) == value) {
      std::snprintf(buf, sizeof buf, "%s", trial);
      break;
    }
  }
  std::string s = buf;
  // Expand to an exact ratio of integers.
  bool neg = false;
  std::size_t p = 0;
  if (s[0] == '-') {
    neg = true;
    p = 1;
  }
  int exp10 = 0;
  if (auto e = s.find_first_of("eE"); e != std::string::npos) {
    exp10 = std::stoi(s.substr(e + 1));
    s = s.substr(0, e);
  }
  i128 num = 0, den = 1;
  bool after_dot = false;
  for (; p < s.size(); ++p) {
    if (s[p] == '.') {
      after_dot = true;
      continue;
    }
    num = num * 10 + (s[p] - '0');
    if (after_dot) den *= 10;
  }
  for (; exp10 > 0; --exp10) num *= 10;
  for (; exp10 < 0; ++exp10) den *= 10;
  return format_metric(Ratio{neg ? -num : num, den});
}

}  // namespace footprint
