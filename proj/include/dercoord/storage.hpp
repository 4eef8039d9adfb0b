#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dercoord/common.hpp"
#include "dercoord/conic.hpp"

namespace dercoord {

struct BatterySpec {
  double q_max_kwh = 0.0;
  double q_min_kwh = 0.0;
  double u_max_kw = 0.0;
  double u_min_kw = 0.0;  // < 0, discharge limit
  double leakage = 1.0;   // eta in [0,1], fraction of charge kept per step
  double efficiency = 1.0;  // mu in (0,1]; 1 = simple model

  void validate() const {
    if (!(q_max_kwh > 0) || q_min_kwh < 0 || q_min_kwh > q_max_kwh)
      throw ValueError("battery capacity bounds invalid");
    if (!(u_min_kw < 0 && 0 < u_max_kw))
      throw ValueError("battery rate bounds must straddle zero");
    if (leakage < 0 || leakage > 1) throw ValueError("leakage outside [0,1]");
    if (!(efficiency > 0 && efficiency <= 1))
      throw ValueError("efficiency outside (0,1]");
  }
};

struct BatteryState {
  double q_kwh = 0.0;
  int bus = -1;
};

namespace detail {
inline constexpr double kChargeEps = 1e-9;
}

/// q' = u*delta + eta*q. Never clamps: a bound violation is a controller
/// bug and aborts the simulation with diagnostics.
inline BatteryState step_simple(const BatteryState& state, double u_kw,
                                double delta_h, const BatterySpec& spec) {
  if (u_kw < spec.u_min_kw - detail::kChargeEps ||
      u_kw > spec.u_max_kw + detail::kChargeEps)
    throw BoundsViolation("charging rate outside limits: u=" +
                          std::to_string(u_kw));
  double q = u_kw * delta_h + spec.leakage * state.q_kwh;
  if (q < spec.q_min_kwh - detail::kChargeEps ||
      q > spec.q_max_kwh + detail::kChargeEps)
    throw BoundsViolation("charge would leave [q_min,q_max]: q=" +
                          std::to_string(q) + " bus=" + std::to_string(state.bus));
  return {q, state.bus};
}

/// Split-rate variant with charging efficiency mu:
/// q' = mu*u_charge*delta - (u_discharge/mu)*delta + eta*q.
/// At most one of the two rates may be nonzero.
inline BatteryState step_split(const BatteryState& state, double u_charge_kw,
                               double u_discharge_kw, double delta_h,
                               const BatterySpec& spec) {
  if (u_charge_kw < 0 || u_discharge_kw < 0)
    throw ValueError("split rates must be nonnegative");
  if (u_charge_kw > detail::kChargeEps && u_discharge_kw > detail::kChargeEps)
    throw ValueError("cannot charge and discharge in the same step");
  if (u_charge_kw > spec.u_max_kw + detail::kChargeEps ||
      -u_discharge_kw < spec.u_min_kw - detail::kChargeEps)
    throw BoundsViolation("split rate outside limits");
  double q = spec.efficiency * u_charge_kw * delta_h -
             u_discharge_kw / spec.efficiency * delta_h +
             spec.leakage * state.q_kwh;
  if (q < spec.q_min_kwh - detail::kChargeEps ||
      q > spec.q_max_kwh + detail::kChargeEps)
    throw BoundsViolation("charge would leave [q_min,q_max]: q=" +
                          std::to_string(q));
  return {q, state.bus};
}

/// Variable indices of one storage block over a horizon: u[unit][t], q[unit][t].
struct StorageVars {
  std::vector<std::vector<int>> u;
  std::vector<std::vector<int>> q;
};

/// Recurrence equalities q_t = eta*q_{t-1} + u_t*delta with box bounds,
/// one chain per unit, for embedding in any ConicProgram. Units here are
/// whatever the caller uses for q_init (the recurrence is scale-free).
inline StorageVars build_storage_constraints(ProgramBuilder& pb,
                                             std::span<const BatterySpec> specs,
                                             int horizon,
                                             std::span<const double> q_init,
                                             double delta_h, double power_scale = 1.0) {
  if (horizon < 1) throw DimensionError("horizon must be >= 1");
  if (specs.size() != q_init.size())
    throw DimensionError("q_init size must match specs");
  StorageVars sv;
  sv.u.resize(specs.size());
  sv.q.resize(specs.size());
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const BatterySpec& sp = specs[k];
    sp.validate();
    double prev_q = q_init[k];
    int prev_var = -1;
    for (int t = 0; t < horizon; ++t) {
      int u = pb.add_var(sp.u_min_kw * power_scale, sp.u_max_kw * power_scale);
      int q = pb.add_var(sp.q_min_kwh * power_scale, sp.q_max_kwh * power_scale);
      LinExpr row = LinExpr::variable(q);
      row.add(u, -delta_h);
      if (t == 0)
        pb.add_eq(row, sp.leakage * prev_q * power_scale);
      else {
        row.add(prev_var, -sp.leakage);
        pb.add_eq(row, 0.0);
      }
      sv.u[k].push_back(u);
      sv.q[k].push_back(q);
      prev_var = q;
    }
  }
  return sv;
}

}  // namespace dercoord
