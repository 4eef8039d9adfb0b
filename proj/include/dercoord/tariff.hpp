#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dercoord/common.hpp"
#include "dercoord/storage.hpp"

namespace dercoord {

/// Two-tier time-of-use price schedule. Default is the 28c/20c split with
/// the peak window [14:00, 21:00), start inclusive, end exclusive.
struct TouTariff {
  double peak_price = 0.28;     // $/kWh
  double offpeak_price = 0.20;  // $/kWh
  int peak_start_hour = 14;
  int peak_end_hour = 21;

  void validate() const {
    if (peak_price < offpeak_price)
      throw ValueError("peak price below off-peak price");
    if (peak_start_hour < 0 || peak_end_hour > 24 ||
        peak_start_hour >= peak_end_hour)
      throw ValueError("peak window must lie within [0,24)");
  }
  int peak_hours() const { return peak_end_hour - peak_start_hour; }
  int offpeak_hours() const { return 24 - peak_hours(); }
  double spread() const { return peak_price - offpeak_price; }
};

inline double price_at(long step, double delta_h, const TouTariff& t) {
  double hour = std::fmod(static_cast<double>(step) * delta_h, 24.0);
  return (hour >= t.peak_start_hour && hour < t.peak_end_hour) ? t.peak_price
                                                               : t.offpeak_price;
}

// Reported power-quality metric always uses the nominal +-5% band, even
// though the controller's penalty band is tighter.
inline constexpr double kMetricBandLo = 0.95;
inline constexpr double kMetricBandHi = 1.05;

/// Squared deviation of one voltage sample outside the nominal band, pu^2.
inline double hinge_sq_deviation(double v_pu) {
  double d = std::max(v_pu - kMetricBandHi, 0.0) +
             std::max(kMetricBandLo - v_pu, 0.0);
  return d * d;
}

/// Sum of squared band violations over a [step][bus] voltage array.
inline double sq_voltage_deviation(const std::vector<std::vector<double>>& v) {
  double acc = 0.0;
  for (const auto& row : v)
    for (double x : row) acc += hinge_sq_deviation(x);
  return acc;
}

/// Tariff-weighted value of storage throughput: sum p_t * (-u_t) * delta
/// over a [step][unit] action array. Equals cost(no storage) - cost(with
/// storage) exactly when loads are otherwise fixed.
inline double arbitrage_profit(const std::vector<std::vector<double>>& u_kw,
                               const TouTariff& tariff, double delta_h,
                               long first_step = 0) {
  double acc = 0.0;
  for (std::size_t t = 0; t < u_kw.size(); ++t) {
    double p = price_at(first_step + static_cast<long>(t), delta_h, tariff);
    for (double u : u_kw[t]) acc += p * (-u) * delta_h;
  }
  return acc;
}

/// Analytic profit ceiling for lossless batteries cycling daily under a
/// two-tier tariff. If rates cannot complete a full cycle the ceiling is
/// rate-limited: throughput = min(q_max, u_max*offpeak_h, |u_min|*peak_h).
inline double max_arbitrage_oracle(std::span<const BatterySpec> specs,
                                   const TouTariff& tariff, int days) {
  double total = 0.0;
  for (const BatterySpec& sp : specs) {
    double throughput =
        std::min({sp.q_max_kwh, sp.u_max_kw * tariff.offpeak_hours(),
                  -sp.u_min_kw * tariff.peak_hours()});
    total += throughput * tariff.spread() * days;
  }
  return total;
}

/// Accumulators for one simulation run; counted over the post-warmup window.
struct SimMetrics {
  double sq_volt_dev = 0.0;      // Eq-style metric on true voltages, pu^2
  double arbitrage_profit = 0.0; // $
  double energy_cost = 0.0;      // $ paid at the substation
  long violation_count = 0;      // oracle non-convergence steps
  long counted_steps = 0;
};

}  // namespace dercoord
