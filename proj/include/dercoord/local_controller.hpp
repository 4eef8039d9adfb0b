#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "dercoord/common.hpp"
#include "dercoord/conic.hpp"
#include "dercoord/forecast.hpp"
#include "dercoord/global_controller.hpp"
#include "dercoord/storage.hpp"
#include "dercoord/tariff.hpp"

namespace dercoord {

struct LCConfig {
  double gamma = 100.0;  // profile-following weight
  int n_scenarios = 10;
  int delta_f = 48;
  double delta_h = 1.0;
  TouTariff tariff;
  SolverSettings solver;
};

struct LCDecision {
  double u_now_kw = 0.0;
  std::vector<double> planned_u_kw;
  double cost_term = 0.0;       // sum_g sum_t p_t z
  double deviation_term = 0.0;  // gamma * sum_g sum_t |z - x|
  bool fallback = false;
};

/// One local MPC solve: minimize sum over scenarios and steps of
/// p_t*z^g_t + gamma*|z^g_t - x_t| with z^g_t = d_hat^g_t + u_t inside the
/// GC bounds, one shared u across scenarios, battery recurrence and boxes.
/// Only the first u is executed by the caller.
inline LCDecision solve_local(const std::vector<double>& profile_kw,
                              const std::vector<double>& lower_kw,
                              const std::vector<double>& upper_kw,
                              const std::vector<std::vector<double>>& scenarios_kw,
                              double q_now_kwh, long first_step,
                              const BatterySpec& spec, const LCConfig& cfg) {
  const int T = static_cast<int>(profile_kw.size());
  if (T < 1) throw StalePlan("plan slice is empty");
  if (lower_kw.size() != profile_kw.size() || upper_kw.size() != profile_kw.size())
    throw ShapeMismatch("plan arrays differ in length");
  if (scenarios_kw.empty()) throw ValueError("need at least one scenario");
  for (const auto& s : scenarios_kw)
    if (static_cast<int>(s.size()) != T)
      throw ShapeMismatch("scenario length does not match plan slice");
  const int G = static_cast<int>(scenarios_kw.size());

  ProgramBuilder pb;
  std::vector<BatterySpec> specs{spec};
  std::vector<double> q0{q_now_kwh};
  StorageVars sv = build_storage_constraints(pb, specs, T, q0, cfg.delta_h);
  std::vector<std::vector<int>> z(static_cast<std::size_t>(G));
  std::vector<std::vector<int>> dev_pos(static_cast<std::size_t>(G)),
      dev_neg(static_cast<std::size_t>(G));
  for (int g = 0; g < G; ++g) {
    for (int t = 0; t < T; ++t) {
      double price = price_at(first_step + t, cfg.delta_h, cfg.tariff);
      int zv = pb.add_var(lower_kw[static_cast<std::size_t>(t)],
                          upper_kw[static_cast<std::size_t>(t)], 0.0, price);
      int ap = pb.add_var(0.0, kInf, 0.0, cfg.gamma);
      int an = pb.add_var(0.0, kInf, 0.0, cfg.gamma);
      // z = d_hat + u
      LinExpr link = LinExpr::variable(zv);
      link.add(sv.u[0][static_cast<std::size_t>(t)], -1.0);
      pb.add_eq(link, scenarios_kw[static_cast<std::size_t>(g)]
                                  [static_cast<std::size_t>(t)]);
      // z - x = ap - an
      LinExpr dev = LinExpr::variable(zv);
      dev.add(ap, -1.0).add(an, 1.0);
      pb.add_eq(dev, profile_kw[static_cast<std::size_t>(t)]);
      z[static_cast<std::size_t>(g)].push_back(zv);
      dev_pos[static_cast<std::size_t>(g)].push_back(ap);
      dev_neg[static_cast<std::size_t>(g)].push_back(an);
    }
  }

  ConicSolution sol = solve(pb.build(), cfg.solver);
  LCDecision dec;
  if (sol.status == SolveStatus::infeasible) {
    // Cannot happen with a well-formed plan; a safe no-op, reported loudly.
    dec.fallback = true;
    dec.planned_u_kw.assign(static_cast<std::size_t>(T), 0.0);
    return dec;
  }
  if (sol.status == SolveStatus::max_iters && sol.primal_residual > 1e-3)
    throw SolverFailure("local optimization did not converge");

  dec.planned_u_kw.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t)
    dec.planned_u_kw[static_cast<std::size_t>(t)] =
        sol.x[sv.u[0][static_cast<std::size_t>(t)]];
  for (int g = 0; g < G; ++g) {
    for (int t = 0; t < T; ++t) {
      double price = price_at(first_step + t, cfg.delta_h, cfg.tariff);
      dec.cost_term +=
          price * sol.x[z[static_cast<std::size_t>(g)][static_cast<std::size_t>(t)]];
      dec.deviation_term +=
          cfg.gamma *
          (sol.x[dev_pos[static_cast<std::size_t>(g)][static_cast<std::size_t>(t)]] +
           sol.x[dev_neg[static_cast<std::size_t>(g)][static_cast<std::size_t>(t)]]);
    }
  }
  // Executed action must be exactly battery-feasible regardless of solver
  // tolerance: clamp into the rate box and the charge headroom.
  double lo = std::max(spec.u_min_kw,
                       (spec.q_min_kwh - spec.leakage * q_now_kwh) / cfg.delta_h);
  double hi = std::min(spec.u_max_kw,
                       (spec.q_max_kwh - spec.leakage * q_now_kwh) / cfg.delta_h);
  dec.u_now_kw = std::clamp(dec.planned_u_kw[0], lo, hi);
  return dec;
}

/// The local layer: one controller per storage node. Keeps fresh local
/// forecasts, per-lead residual statistics, and never sees any other node.
class LocalController {
 public:
  LocalController(int node, BatterySpec spec, LCConfig cfg, std::uint64_t seed)
      : node_(node), spec_(spec), cfg_(cfg), seed_(seed) {}

  int node() const { return node_; }

  /// One Algorithm-1 LC step at time `now`. `local_history` is this node's
  /// own uncontrollable net load for [0, now); the plan must have been
  /// issued within the last delta_gc steps.
  LCDecision step(long now, const std::vector<double>& local_history,
                  const GlobalPlan& plan, int delta_gc, double q_now_kwh,
                  const std::vector<double>* artificial_truth = nullptr,
                  double sigma = 0.0) {
    long rel = now - plan.issued_at;
    if (rel < 0 || rel >= delta_gc ||
        rel + cfg_.delta_f > static_cast<long>(plan.profile.size()))
      throw StalePlan("plan does not cover the local horizon");
    if (static_cast<long>(local_history.size()) != now)
      throw ValueError("local history must end at now");

    absorb_residuals(local_history);

    std::vector<double> point;
    if (artificial_truth) {
      if (static_cast<long>(artificial_truth->size()) < now + cfg_.delta_f)
        throw ValueError("truth series too short for artificial forecaster");
      std::vector<double> window(artificial_truth->begin() + now,
                                 artificial_truth->begin() + now + cfg_.delta_f);
      point = forecast_artificial(
          window, sigma,
          derive_seed(seed_, 0x1c01u, static_cast<std::uint64_t>(now)), 0);
    } else {
      ForecastRequest req;
      req.history = {local_history};
      req.horizon = cfg_.delta_f;
      point = forecast_seasonal(req)[0];
    }

    ScenarioSet scen = generate_scenarios(
        {point}, {tracker_.profile(cfg_.delta_f)}, cfg_.n_scenarios,
        derive_seed(seed_, 0x1ce0u, static_cast<std::uint64_t>(now)));
    std::vector<std::vector<double>> local_scen;
    local_scen.reserve(scen.scenarios.size());
    for (auto& s : scen.scenarios) local_scen.push_back(std::move(s[0]));

    pending_.push_back({now, point, 0});

    auto b = static_cast<std::size_t>(rel);
    std::vector<double> x(plan.profile.begin() + b,
                          plan.profile.begin() + b + cfg_.delta_f);
    std::vector<double> lo(plan.lower.begin() + b,
                           plan.lower.begin() + b + cfg_.delta_f);
    std::vector<double> hi(plan.upper.begin() + b,
                           plan.upper.begin() + b + cfg_.delta_f);
    return solve_local(x, lo, hi, local_scen, q_now_kwh, now, spec_, cfg_);
  }

 private:
  void absorb_residuals(const std::vector<double>& history) {
    const long have = static_cast<long>(history.size());
    for (auto& rec : pending_) {
      for (std::size_t j = rec.consumed; j < rec.point.size(); ++j) {
        long abs_step = rec.issued_at + static_cast<long>(j);
        if (abs_step >= have) break;
        tracker_.record(static_cast<int>(j),
                        history[static_cast<std::size_t>(abs_step)] - rec.point[j]);
        rec.consumed = j + 1;
      }
    }
    std::erase_if(pending_, [](const PendingForecast& rec) {
      return rec.consumed >= rec.point.size();
    });
  }

  struct PendingForecast {
    long issued_at = 0;
    std::vector<double> point;
    std::size_t consumed = 0;
  };

  int node_;
  BatterySpec spec_;
  LCConfig cfg_;
  std::uint64_t seed_;
  ResidualTracker tracker_;
  std::vector<PendingForecast> pending_;
};

}  // namespace dercoord
