#include <gtest/gtest.h>

#include <random>

#include "footprint/eco_score.hpp"

using namespace footprint;
using namespace std::chrono;

namespace {

const Instant kT0 = parse_instant("2025-01-20T08:00:00Z");
const PenaltySchedule kSchedule;

EcoScoreState at_score(int score, Instant t = kT0) {
  auto s = EcoScoreState::fresh(t);
  s.score = score;
  return s;
}

// Literal transcription of the pause-tier chain, minutes as real numbers.
int reference_penalty(double pause_minutes) {
  if (pause_minutes >= 60) return 7;
  if (pause_minutes >= 30) return 8;
  if (pause_minutes >= 15) return 9;
  if (pause_minutes >= 7) return 10;
  if (pause_minutes >= 3) return 11;
  if (pause_minutes >= 1) return 12;
  return 13;
}

}  // namespace

TEST(Accrue, OvernightAddsTwentyFourAndClamps) {
  auto s = accrue(at_score(76), kSchedule, kT0 + hours(8));
  EXPECT_EQ(s.score, 100);
  auto low = accrue(at_score(40), kSchedule, kT0 + hours(8));
  EXPECT_EQ(low.score, 64);
}

TEST(Accrue, NoTimeNoChange) {
  auto s = accrue(at_score(50), kSchedule, kT0);
  EXPECT_EQ(s.score, 50);
  EXPECT_EQ(s.regen_remainder, Millis{0});
}

TEST(Accrue, RemainderCarriesAcrossCalls) {
  auto s = accrue(at_score(50), kSchedule, kT0 + minutes(19));
  EXPECT_EQ(s.score, 50);
  EXPECT_EQ(s.regen_remainder, minutes(19));
  s = accrue(s, kSchedule, kT0 + minutes(20));
  EXPECT_EQ(s.score, 51);
  EXPECT_EQ(s.regen_remainder, Millis{0});
  // oracle: the same 20 minutes in one call
  auto once = accrue(at_score(50), kSchedule, kT0 + minutes(20));
  EXPECT_EQ(once, s);
}

TEST(Accrue, RejectsTimeRunningBackwards) {
  EXPECT_THROW(accrue(at_score(50), kSchedule, kT0 - seconds(1)), ClockSkewError);
}

TEST(ApplyQuery, LongPauseCostsSeven) {
  auto s = at_score(100);
  s.last_query_at = kT0 - minutes(90);
  EXPECT_EQ(apply_query(s, kSchedule, kT0).score, 93);
}

TEST(ApplyQuery, RapidQueryClampsAtZero) {
  auto s = at_score(10);
  s.last_query_at = kT0 - seconds(30);
  auto out = apply_query(s, kSchedule, kT0);
  EXPECT_EQ(out.score, 0);
  EXPECT_EQ(out.last_query_at, kT0);
}

TEST(ApplyQuery, FirstQueryUsesLongestPauseTier) {
  EXPECT_EQ(apply_query(at_score(100), kSchedule, kT0).score, 93);
}

TEST(ApplyQuery, ExactBoundariesAreInclusive) {
  for (auto [pause, expected] : {std::pair{minutes(60), 7}, {minutes(30), 8}, {minutes(15), 9}, {minutes(7), 10},
                                 {minutes(3), 11}, {minutes(1), 12}}) {
    auto s = at_score(100);
    s.last_query_at = kT0 - pause;
    EXPECT_EQ(100 - apply_query(s, kSchedule, kT0).score, expected) << pause.count();
    s.last_query_at = kT0 - (pause - Millis{1});
    EXPECT_EQ(100 - apply_query(s, kSchedule, kT0).score, expected + 1) << pause.count();
  }
}

TEST(ApplyQuery, SixHourlyQueriesEndAtSeventySix) {
  // queries at 0h..5h, observed at 6h
  auto s = EcoScoreState::fresh(kT0);
  for (int h = 0; h < 6; ++h) {
    s = accrue(s, kSchedule, kT0 + hours(h));
    s = apply_query(s, kSchedule, kT0 + hours(h));
  }
  EXPECT_EQ(s.score, 73);
  s = accrue(s, kSchedule, kT0 + hours(6));
  EXPECT_EQ(s.score, 76);
  s = accrue(s, kSchedule, kT0 + hours(14));
  EXPECT_EQ(s.score, 100);
}

TEST(ImageBracket, Examples) {
  EXPECT_EQ(image_bracket(67), 2);
  EXPECT_EQ(image_bracket(15), 5);
  EXPECT_EQ(image_bracket(100), 1);
  EXPECT_EQ(image_bracket(0), 5);
  EXPECT_EQ(image_bracket(80), 1);
  EXPECT_EQ(image_bracket(79.5), 2);
  EXPECT_EQ(image_bracket(60), 2);
  EXPECT_EQ(image_bracket(59), 3);
  EXPECT_EQ(image_bracket(40), 3);
  EXPECT_EQ(image_bracket(20), 4);
  EXPECT_EQ(image_bracket(19.99), 5);
  EXPECT_THROW(image_bracket(101), std::invalid_argument);
  EXPECT_THROW(image_bracket(-1), std::invalid_argument);
}

TEST(PenaltySchedule, DefaultMatchesReferenceChain) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> ms(0, 3 * 3600 * 1000);
  for (int i = 0; i < 50000; ++i) {
    auto p = Millis{ms(rng)};
    ASSERT_EQ(kSchedule.penalty_for(p), reference_penalty(p.count() / 60000.0)) << p.count();
  }
}

TEST(PenaltySchedule, ValidationRejectsNonMonotoneTiers) {
  PenaltySchedule s;
  EXPECT_NO_THROW(s.validate());
  std::swap(s.tiers[1], s.tiers[2]);
  EXPECT_THROW(s.validate(), std::invalid_argument);
  PenaltySchedule no_floor;
  no_floor.tiers.pop_back();
  EXPECT_THROW(no_floor.validate(), std::invalid_argument);
}

TEST(EcoScoreProperties, ClampMonotonicityPartitionDeterminism) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::int64_t> gap_ms(0, 4LL * 3600 * 1000);
  for (int trace = 0; trace < 2000; ++trace) {
    auto s = EcoScoreState::fresh(kT0, std::uniform_int_distribution<int>(0, 100)(rng));
    Instant t = kT0;
    int n = std::uniform_int_distribution<int>(1, 40)(rng);
    for (int i = 0; i < n; ++i) {
      Instant next = t + Millis{gap_ms(rng)};
      // partition invariance at a random split point
      Instant split = t + Millis{std::uniform_int_distribution<std::int64_t>(0, (next - t).count())(rng)};
      auto whole = accrue(s, kSchedule, next);
      auto parts = accrue(accrue(s, kSchedule, split), kSchedule, next);
      ASSERT_EQ(whole, parts);
      ASSERT_LT(whole.regen_remainder, kSchedule.regen_period);
      // monotonicity: a shorter pause never scores higher
      auto shorter = whole;
      if (whole.last_query_at) {
        auto later_prev = *whole.last_query_at + Millis{std::uniform_int_distribution<std::int64_t>(
                                                     0, (next - *whole.last_query_at).count())(rng)};
        shorter.last_query_at = later_prev;
        ASSERT_LE(apply_query(shorter, kSchedule, next).score, apply_query(whole, kSchedule, next).score);
      }
      s = apply_query(whole, kSchedule, next);
      ASSERT_GE(s.score, 0);
      ASSERT_LE(s.score, 100);
      t = next;
    }
  }
}
