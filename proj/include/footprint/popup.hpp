#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "diag.hpp"
#include "footprint.hpp"
#include "time.hpp"

namespace footprint {

enum class PopupMode { Count, ResourceThreshold };

inline std::string_view popup_mode_name(PopupMode m) {
  return m == PopupMode::Count ? "count" : "resource-threshold";
}

struct PopupSettings {
  PopupMode mode = PopupMode::Count;
  int limit = 7;
  // Resource-threshold mode: fire whenever usage since the last popup
  // reaches either bound (Wh / mL). Zero disables that bound.
  Micro energy_limit;
  Micro water_limit;

  void validate() const {
    if (limit <= 0) throw std::invalid_argument("popup.limit must be a positive integer");
    if (mode == PopupMode::ResourceThreshold && energy_limit.raw() <= 0 && water_limit.raw() <= 0)
      throw std::invalid_argument("popup.mode resource-threshold needs popup.energy_limit_wh or popup.water_limit_ml");
    if (energy_limit.raw() < 0 || water_limit.raw() < 0)
      throw std::invalid_argument("popup limits must be >= 0");
  }
};

struct PopupPolicyState {
  std::int64_t queries_since_last_popup = 0;
  int limit = 7;
  bool popup_open = false;
  std::int64_t popups_fired = 0;
  std::optional<Instant> last_popup_opened_at;
  std::optional<Instant> last_popup_closed_at;
  // Resource-threshold mode accumulators.
  Micro energy_since_last_popup;
  Micro water_since_last_popup;

  bool operator==(const PopupPolicyState&) const = default;
};

struct PopupPayload {
  std::string energy_kwh;
  std::string water_liters;
  HumanScaleReading human_energy;
  HumanScaleReading human_water;
  std::string read_more_url;
  std::int64_t query_count = 0;
  Instant opened_at{};
};

inline PopupPayload make_popup_payload(const UsageLedger& ledger, const ResourceModel& model,
                                       std::string read_more_url, Instant at) {
  return PopupPayload{energy_kwh_text(ledger.energy_total), water_liters_text(ledger.water_total),
                      to_human_energy(ledger.energy_total, model), to_human_water(ledger.water_total, model),
                      std::move(read_more_url), ledger.query_count, at};
}

struct PopupDecision {
  PopupPolicyState state;
  std::optional<PopupPayload> payload;
};

/// Advances the popup counter for one query (ledger already updated). When
/// the limit is reached the counter resets and a payload carrying the current
/// totals is emitted. A popup that is still open is simply refreshed, so the
/// fired count stays floor(queries / limit).
inline PopupDecision on_query(PopupPolicyState state, const UsageLedger& ledger, const ResourceModel& model,
                              const PopupSettings& settings, const std::string& read_more_url, Instant at) {
  bool fire = false;
  if (settings.mode == PopupMode::Count) {
    state.queries_since_last_popup += 1;
    fire = state.queries_since_last_popup >= state.limit;
  } else {
    state.queries_since_last_popup += 1;
    state.energy_since_last_popup += model.energy_per_query;
    state.water_since_last_popup += model.water_per_query;
    fire = (settings.energy_limit.raw() > 0 && state.energy_since_last_popup >= settings.energy_limit) ||
           (settings.water_limit.raw() > 0 && state.water_since_last_popup >= settings.water_limit);
  }
  if (!fire) return {std::move(state), std::nullopt};
  state.queries_since_last_popup = 0;
  state.energy_since_last_popup = Micro{};
  state.water_since_last_popup = Micro{};
  state.popup_open = true;
  state.popups_fired += 1;
  state.last_popup_opened_at = at;
  return {std::move(state), make_popup_payload(ledger, model, read_more_url, at)};
}

/// Closes the open popup. Returns whether anything changed; a dismiss with no
/// open popup is a no-op.
inline std::pair<PopupPolicyState, bool> on_dismiss(PopupPolicyState state, Instant at) {
  if (!state.popup_open) {
    diag(DiagLevel::Info, "popup dismiss ignored: no popup open");
    return {std::move(state), false};
  }
  state.popup_open = false;
  state.last_popup_closed_at = at;
  return {std::move(state), true};
}

}  // namespace footprint
