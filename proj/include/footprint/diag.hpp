#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace footprint {

enum class DiagLevel { Debug, Info, Warn, Error };

inline std::string_view diag_level_name(DiagLevel l) {
  switch (l) {
    case DiagLevel::Debug: return "debug";
    case DiagLevel::Info: return "info";
    case DiagLevel::Warn: return "warn";
    case DiagLevel::Error: return "error";
  }
  return "?";
}

using DiagSink = std::function<void(DiagLevel, std::string_view)>;

namespace detail {

struct DiagState {
  std::mutex mu;
  DiagLevel threshold = DiagLevel::Warn;
  DiagSink sink;
};

inline DiagState& diag_state() {
  static DiagState s;
  return s;
}

}  // namespace detail

/// Replaces the process-wide diagnostic sink; an empty sink restores stderr.
inline void set_diag_sink(DiagSink sink, DiagLevel threshold = DiagLevel::Debug) {
  auto& s = detail::diag_state();
  std::lock_guard lk(s.mu);
  s.sink = std::move(sink);
  s.threshold = threshold;
}

inline void set_diag_threshold(DiagLevel threshold) {
  auto& s = detail::diag_state();
  std::lock_guard lk(s.mu);
  s.threshold = threshold;
}

inline void diag(DiagLevel level, std::string_view msg) {
  auto& s = detail::diag_state();
  std::lock_guard lk(s.mu);
  if (level < s.threshold) return;
  if (s.sink) {
    s.sink(level, msg);
  } else {
    std::cerr << "[" << diag_level_name(level) << "] " << msg << '\n';
  }
}

}  // namespace footprint
