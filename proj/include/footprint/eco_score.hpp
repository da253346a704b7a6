#pragma once

#include <algorithm>
#include <chrono>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "time.hpp"

namespace footprint {

inline constexpr int kMaxScore = 100;
inline constexpr int kMinScore = 0;

struct PenaltyTier {
  Millis min_pause{0};
  int penalty = 0;
  bool operator==(const PenaltyTier&) const = default;
};

/// Tiers ordered from the longest pause (smallest penalty) to the shortest.
struct PenaltySchedule {
  std::vector<PenaltyTier> tiers{
      {std::chrono::minutes{60}, 7}, {std::chrono::minutes{30}, 8}, {std::chrono::minutes{15}, 9},
      {std::chrono::minutes{7}, 10}, {std::chrono::minutes{3}, 11}, {std::chrono::minutes{1}, 12},
      {Millis{0}, 13},
  };
  Millis regen_period = std::chrono::minutes{20};

  void validate() const {
    if (tiers.empty()) throw std::invalid_argument("score.tiers must not be empty");
    if (regen_period <= Millis{0}) throw std::invalid_argument("score.regen_period_minutes must be > 0");
    if (tiers.back().min_pause != Millis{0})
      throw std::invalid_argument("score.tiers must end with a tier at min_pause_minutes = 0");
    for (std::size_t i = 0; i < tiers.size(); ++i) {
      if (tiers[i].penalty < 0) throw std::invalid_argument("score.tiers penalties must be >= 0");
      if (i > 0 && !(tiers[i].min_pause < tiers[i - 1].min_pause && tiers[i].penalty > tiers[i - 1].penalty))
        throw std::invalid_argument(
            "score.tiers must be strictly decreasing in min_pause and strictly increasing in penalty (tier " +
            std::to_string(i) + ")");
    }
  }

  /// Penalty of the first tier whose min_pause <= pause. A missing previous
  /// query counts as the longest-pause tier.
  int penalty_for(std::optional<Millis> pause) const {
    if (!pause) return tiers.front().penalty;
    for (const auto& t : tiers)
      if (t.min_pause <= *pause) return t.penalty;
    return tiers.back().penalty;
  }

  bool operator==(const PenaltySchedule&) const = default;
};

struct EcoScoreState {
  int score = kMaxScore;
  std::optional<Instant> last_query_at;
  Instant last_accrual_at{};
  Millis regen_remainder{0};

  static EcoScoreState fresh(Instant at, int initial = kMaxScore) {
    EcoScoreState s;
    s.score = initial;
    s.last_accrual_at = at;
    return s;
  }

  bool operator==(const EcoScoreState&) const = default;
};

struct ClockSkewError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Regenerates one point per full regen period since the last accrual,
/// carrying the unspent remainder so accrual does not depend on how often it
/// is called. Saturates at 100.
inline EcoScoreState accrue(EcoScoreState state, const PenaltySchedule& schedule, Instant now) {
  if (now < state.last_accrual_at)
    throw ClockSkewError("accrue: time ran backwards (" + format_instant(now) + " < " +
                         format_instant(state.last_accrual_at) + ")");
  Millis pool = (now - state.last_accrual_at) + state.regen_remainder;
  auto points = pool / schedule.regen_period;
  state.regen_remainder = pool % schedule.regen_period;
  state.score = static_cast<int>(std::min<long long>(kMaxScore, state.score + static_cast<long long>(points)));
  state.last_accrual_at = now;
  return state;
}

inline EcoScoreState accrue(EcoScoreState state, Instant now) { return accrue(std::move(state), PenaltySchedule{}, now); }

/// Charges the pause-length penalty for a query. Callers accrue up to
/// query_at first.
inline EcoScoreState apply_query(EcoScoreState state, const PenaltySchedule& schedule, Instant query_at) {
  std::optional<Millis> pause;
  if (state.last_query_at) {
    if (query_at < *state.last_query_at)
      throw ClockSkewError("apply_query: query precedes previous query (" + format_instant(query_at) + ")");
    pause = query_at - *state.last_query_at;
  }
  state.score = std::max(kMinScore, state.score - schedule.penalty_for(pause));
  state.last_query_at = query_at;
  return state;
}

/// 1 for [80,100], 2 for [60,80), 3 for [40,60), 4 for [20,40), 5 for [0,20).
inline int image_bracket(double score) {
  if (!(score >= kMinScore && score <= kMaxScore)) throw std::invalid_argument("image_bracket: score outside [0,100]");
  if (score >= 80) return 1;
  if (score >= 60) return 2;
  if (score >= 40) return 3;
  if (score >= 20) return 4;
  return 5;
}

}  // namespace footprint
