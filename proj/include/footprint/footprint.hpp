#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "decimal.hpp"
#include "time.hpp"

namespace footprint {

/// Per-query resource constants plus the anchors used for everyday units.
/// Energy in Wh, water in mL, vehicle efficiency in Wh/mile, tub volumes and
/// water tier thresholds in liters, energy tier threshold in lightbulb-hours.
struct ResourceModel {
  Micro energy_per_query = Micro::parse("2.9");
  Micro water_per_query = Micro::parse("16.9");
  Micro bulb_power = Micro::from_int(10);
  Micro cup_volume = Micro::from_int(240);
  Micro vehicle_efficiency = Micro::from_int(250);
  Micro bathtub_volume = Micro::from_int(150);
  Micro hottub_volume = Micro::from_int(1000);
  Micro energy_tier_threshold = Micro::from_int(100);
  std::pair<Micro, Micro> water_tier_thresholds{Micro::from_int(150), Micro::from_int(1000)};

  /// Throws std::invalid_argument naming the first offending field.
  void validate() const {
    auto positive = [](Micro v, const char* name) {
      if (v.raw() <= 0) throw std::invalid_argument(std::string("resource.") + name + " must be > 0");
    };
    positive(energy_per_query, "energy_per_query_wh");
    positive(water_per_query, "water_per_query_ml");
    positive(bulb_power, "bulb_power_w");
    positive(cup_volume, "cup_volume_ml");
    positive(vehicle_efficiency, "vehicle_efficiency_wh_per_mile");
    positive(bathtub_volume, "bathtub_volume_l");
    positive(hottub_volume, "hottub_volume_l");
    positive(energy_tier_threshold, "energy_tier_threshold_bulb_hours");
    positive(water_tier_thresholds.first, "water_tier_thresholds_l[0]");
    positive(water_tier_thresholds.second, "water_tier_thresholds_l[1]");
    if (!(water_tier_thresholds.first < water_tier_thresholds.second))
      throw std::invalid_argument("resource.water_tier_thresholds_l must be strictly increasing");
  }

  bool operator==(const ResourceModel&) const = default;
};

inline constexpr std::array<std::string_view, 2> kResourceProfiles{"paper-text", "paper-figures"};

/// "paper-text" carries the published per-query averages (2.9 Wh, 16.9 mL);
/// "paper-figures" uses 17.0 mL, the value the published screenshots were rendered with.
inline ResourceModel resource_profile(std::string_view name) {
  ResourceModel m;
  if (name == "paper-text") return m;
  if (name == "paper-figures") {
    m.water_per_query = Micro::parse("17.0");
    return m;
  }
  throw std::invalid_argument("unknown resource profile '" + std::string(name) +
                              "' (expected paper-text or paper-figures)");
}

struct UsageLedger {
  std::string user_id;
  std::int64_t query_count = 0;
  Micro energy_total;  // Wh
  Micro water_total;   // mL
  std::optional<Instant> first_query_at;
  std::optional<Instant> last_query_at;

  bool operator==(const UsageLedger&) const = default;
};

/// Adds one query's worth of resources. Totals are kept as exact multiples of
/// the per-query constants, so any replay lands on the same values.
inline UsageLedger record_query(UsageLedger ledger, const ResourceModel& model, Instant at) {
  ledger.query_count += 1;
  ledger.energy_total = model.energy_per_query * ledger.query_count;
  ledger.water_total = model.water_per_query * ledger.query_count;
  if (!ledger.first_query_at) ledger.first_query_at = at;
  if (!ledger.last_query_at || *ledger.last_query_at < at) ledger.last_query_at = at;
  return ledger;
}

enum class HumanUnit { LightbulbHours, VehicleMiles, Cups, Bathtubs, HotTubs };

inline std::string_view unit_label(HumanUnit u) {
  switch (u) {
    case HumanUnit::LightbulbHours: return "lightbulb-hours";
    case HumanUnit::VehicleMiles: return "vehicle-miles";
    case HumanUnit::Cups: return "cups";
    case HumanUnit::Bathtubs: return "bathtubs";
    case HumanUnit::HotTubs: return "hot-tubs";
  }
  return "?";
}

struct HumanScaleReading {
  Ratio quantity;
  HumanUnit unit = HumanUnit::LightbulbHours;
  std::int64_t pictogram_count = 0;
  std::string formatted;

  std::string_view unit_label() const { return footprint::unit_label(unit); }
};

namespace detail {

inline HumanScaleReading make_reading(Ratio q, HumanUnit unit) {
  return HumanScaleReading{q, unit, q.floor(), format_metric(q)};
}

constexpr i128 kMlPerLiter = 1000;

}  // namespace detail

inline HumanScaleReading to_human_energy(Micro energy_total, const ResourceModel& model) {
  if (energy_total.raw() < 0) throw std::invalid_argument("energy total must be >= 0");
  Ratio bulb_hours{energy_total.raw(), model.bulb_power.raw()};
  // bulb_hours < threshold  <=>  energy * kScale < threshold * bulb_power
  Ratio threshold{model.energy_tier_threshold.raw(), Micro::kScale};
  if (bulb_hours < threshold) return detail::make_reading(bulb_hours, HumanUnit::LightbulbHours);
  return detail::make_reading(Ratio{energy_total.raw(), model.vehicle_efficiency.raw()}, HumanUnit::VehicleMiles);
}

/// Cups below the first threshold, bathtubs from the first up to the second,
/// hot tubs from the second on.
inline HumanScaleReading to_human_water(Micro water_total, const ResourceModel& model) {
  if (water_total.raw() < 0) throw std::invalid_argument("water total must be >= 0");
  i128 water_ml = water_total.raw();
  i128 first_ml = static_cast<i128>(model.water_tier_thresholds.first.raw()) * detail::kMlPerLiter;
  i128 second_ml = static_cast<i128>(model.water_tier_thresholds.second.raw()) * detail::kMlPerLiter;
  if (water_ml < first_ml) return detail::make_reading(Ratio{water_ml, model.cup_volume.raw()}, HumanUnit::Cups);
  if (water_ml < second_ml)
    return detail::make_reading(Ratio{water_ml, model.bathtub_volume.raw() * detail::kMlPerLiter},
                                HumanUnit::Bathtubs);
  return detail::make_reading(Ratio{water_ml, model.hottub_volume.raw() * detail::kMlPerLiter}, HumanUnit::HotTubs);
}

inline std::string energy_kwh_text(Micro energy_total) {
  return format_metric(Ratio{energy_total.raw(), static_cast<i128>(Micro::kScale) * 1000});
}

inline std::string water_liters_text(Micro water_total) {
  return format_metric(Ratio{water_total.raw(), static_cast<i128>(Micro::kScale) * 1000});
}

}  // namespace footprint
