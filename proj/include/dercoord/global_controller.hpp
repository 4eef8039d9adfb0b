#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dercoord/common.hpp"
#include "dercoord/conic.hpp"
#include "dercoord/forecast.hpp"
#include "dercoord/network.hpp"
#include "dercoord/opf.hpp"
#include "dercoord/parallel.hpp"
#include "dercoord/storage.hpp"
#include "dercoord/tariff.hpp"

namespace dercoord {

struct GCConfig {
  int delta_gc = 24;  // buffering delay and cycle period, steps
  int delta_f = 48;   // MPC lookahead, steps
  int n_scenarios = 24;
  double lambda = 1000.0;
  double vtol_plus = 1.045;
  double vtol_minus = 0.955;
  TouTariff tariff;
  double delta_h = 1.0;
  double initial_soc_frac = 0.5;
  SolverSettings solver;
  int workers = 1;

  int horizon() const { return delta_gc + delta_f; }
};

/// The GC->LC message: target net-load profile and soft operating bounds
/// for one storage node, covering delta_gc + delta_f steps from issued_at.
struct GlobalPlan {
  int node = -1;
  long issued_at = 0;
  std::vector<double> profile;  // kW net load
  std::vector<double> lower;
  std::vector<double> upper;

  void validate() const {
    if (profile.size() != lower.size() || profile.size() != upper.size())
      throw ShapeMismatch("plan arrays differ in length");
    for (std::size_t t = 0; t < profile.size(); ++t)
      if (profile[t] < lower[t] - 1e-6 || profile[t] > upper[t] + 1e-6)
        throw ValueError("plan profile escapes its bounds");
  }

  nlohmann::json to_json() const {
    return {{"node", node},
            {"issued_at", issued_at},
            {"x", profile},
            {"x_lower", lower},
            {"x_upper", upper}};
  }
  static GlobalPlan from_json(const nlohmann::json& j) {
    GlobalPlan p;
    p.node = j.at("node").get<int>();
    p.issued_at = j.at("issued_at").get<long>();
    p.profile = j.at("x").get<std::vector<double>>();
    p.lower = j.at("x_lower").get<std::vector<double>>();
    p.upper = j.at("x_upper").get<std::vector<double>>();
    p.validate();
    return p;
  }
};

struct GlobalSolveResult {
  std::map<int, std::vector<double>> net_load_kw;  // per storage node
  std::map<int, std::vector<double>> u_kw;
  double objective = 0.0;
};

/// One network-wide optimization for one forecast scenario: minimize energy
/// cost at the substation plus the soft voltage penalty, subject to storage
/// dynamics and the relaxed flow physics. Returns the storage nodes'
/// optimal net-load profiles.
inline GlobalSolveResult solve_global(
    const RadialNetwork& net, const std::map<int, BatterySpec>& specs,
    const std::vector<std::vector<double>>& scenario_kw, long start_step,
    const std::map<int, double>& q_init_kwh, const GCConfig& cfg) {
  const int nb = net.n_buses();
  if (static_cast<int>(scenario_kw.size()) != nb)
    throw ShapeMismatch("scenario must cover every bus");
  const int T = scenario_kw.empty() ? 0 : static_cast<int>(scenario_kw[0].size());
  for (const auto& row : scenario_kw)
    if (static_cast<int>(row.size()) != T)
      throw ShapeMismatch("scenario rows differ in length");
  const double base = net.base_power_kva();
  const double inv_base = 1.0 / base;

  ProgramBuilder pb;
  std::vector<BatterySpec> spec_list;
  std::vector<double> q0;
  std::vector<int> nodes;
  for (const auto& [node, sp] : specs) {
    nodes.push_back(node);
    spec_list.push_back(sp);
    auto it = q_init_kwh.find(node);
    q0.push_back(it == q_init_kwh.end() ? cfg.initial_soc_frac * sp.q_max_kwh
                                        : it->second);
  }
  StorageVars sv = build_storage_constraints(pb, spec_list, std::max(T, 1), q0,
                                             cfg.delta_h, inv_base);

  InjectionHandles inj;
  inj.p.resize(static_cast<std::size_t>(nb) * static_cast<std::size_t>(T));
  inj.q.resize(inj.p.size());
  for (int t = 0; t < T; ++t) {
    for (int b = 1; b < nb; ++b) {
      std::size_t at = static_cast<std::size_t>(t) * nb + b;
      double d_pu = scenario_kw[static_cast<std::size_t>(b)]
                               [static_cast<std::size_t>(t)] *
                    inv_base;
      LinExpr p(-d_pu);
      auto it = std::find(nodes.begin(), nodes.end(), b);
      if (it != nodes.end()) {
        std::size_t k = static_cast<std::size_t>(it - nodes.begin());
        p.add(sv.u[k][static_cast<std::size_t>(t)], -1.0);
      }
      inj.p[at] = p;
      inj.q[at] =
          LinExpr(-d_pu * net.buses()[static_cast<std::size_t>(b)].tan_phi());
    }
  }
  WBlock wb = build_flow_constraints(pb, net, T, inj);
  build_voltage_penalty(pb, wb, cfg.lambda, cfg.vtol_plus, cfg.vtol_minus);

  for (int t = 0; t < T; ++t) {
    double p = price_at(start_step + t, cfg.delta_h, cfg.tariff);
    pb.add_linear_cost(wb.sre(0, t), p * base * cfg.delta_h);
  }

  ConicProgram prog = pb.build();
  ConicSolution sol = solve(prog, cfg.solver);
  if (sol.status == SolveStatus::infeasible)
    throw SolverFailure("global optimization reported infeasible");
  if (sol.status == SolveStatus::max_iters && sol.primal_residual > 1e-3)
    throw SolverFailure("global optimization did not converge");

  GlobalSolveResult out;
  out.objective = sol.objective;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    std::vector<double> x(static_cast<std::size_t>(T));
    std::vector<double> u(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      double u_kw = sol.x[sv.u[k][static_cast<std::size_t>(t)]] * base;
      u[static_cast<std::size_t>(t)] = u_kw;
      x[static_cast<std::size_t>(t)] =
          scenario_kw[static_cast<std::size_t>(nodes[k])]
                     [static_cast<std::size_t>(t)] +
          u_kw;
    }
    out.net_load_kw[nodes[k]] = std::move(x);
    out.u_kw[nodes[k]] = std::move(u);
  }
  return out;
}

/// Elementwise mean of per-scenario profiles.
inline std::map<int, std::vector<double>> average_profiles(
    const std::vector<std::map<int, std::vector<double>>>& per_scenario) {
  if (per_scenario.empty()) throw ShapeMismatch("no profiles to average");
  std::map<int, std::vector<double>> avg;
  for (const auto& [node, series] : per_scenario.front())
    avg[node].assign(series.size(), 0.0);
  for (const auto& one : per_scenario) {
    if (one.size() != avg.size())
      throw ShapeMismatch("profiles disagree on node set");
    for (const auto& [node, series] : one) {
      auto it = avg.find(node);
      if (it == avg.end() || it->second.size() != series.size())
        throw ShapeMismatch("profiles disagree on shape");
      for (std::size_t t = 0; t < series.size(); ++t)
        it->second[t] += series[t];
    }
  }
  const double inv = 1.0 / static_cast<double>(per_scenario.size());
  for (auto& [node, series] : avg)
    for (double& v : series) v *= inv;
  return avg;
}

enum class BoundDir { lower, upper };

/// Single-timestep bound problem: every bus except `node` is pinned to the
/// averaged net load; objective is the node's net load (either direction)
/// plus the voltage penalty at that step. Returns optimal net load in kW.
inline double solve_bounds(const RadialNetwork& net, int node,
                           const std::vector<double>& pinned_net_kw,
                           const std::vector<double>& reactive_net_kw,
                           BoundDir dir, const GCConfig& cfg) {
  const int nb = net.n_buses();
  if (static_cast<int>(pinned_net_kw.size()) != nb ||
      static_cast<int>(reactive_net_kw.size()) != nb)
    throw ShapeMismatch("pinned profiles must cover every bus");
  const double base = net.base_power_kva();
  ProgramBuilder pb;
  InjectionHandles inj;
  inj.p.resize(static_cast<std::size_t>(nb));
  inj.q.resize(static_cast<std::size_t>(nb));
  for (int b = 1; b < nb; ++b) {
    if (b != node)
      inj.p[static_cast<std::size_t>(b)] =
          LinExpr(-pinned_net_kw[static_cast<std::size_t>(b)] / base);
    inj.q[static_cast<std::size_t>(b)] =
        LinExpr(-reactive_net_kw[static_cast<std::size_t>(b)] / base);
  }
  WBlock wb = build_flow_constraints(pb, net, 1, inj);
  build_voltage_penalty(pb, wb, cfg.lambda, cfg.vtol_plus, cfg.vtol_minus);
  // net load of the node in kW is -base * s_re
  pb.add_linear_cost(wb.sre(node, 0), dir == BoundDir::lower ? -base : base);

  ConicSolution sol = solve(pb.build(), cfg.solver);
  if (sol.status == SolveStatus::infeasible)
    throw SolverFailure("bounds optimization reported infeasible (node " +
                        std::to_string(node) + ")");
  if (sol.status == SolveStatus::max_iters && sol.primal_residual > 1e-3)
    throw SolverFailure("bounds optimization did not converge (node " +
                        std::to_string(node) + ")");
  return -base * sol.x[wb.sre(node, 0)];
}

struct GCCycleDiagnostics {
  long issued_at = 0;
  std::map<int, double> shadow_q_kwh;
  std::map<int, double> true_q_kwh;  // supplied by the simulator, if known
  double max_profile_clamp_kw = 0.0;
  double mean_scenario_objective = 0.0;
};

/// The global layer of the two-layer architecture. Holds the shadow battery
/// state (integrated from its own issued plans; it cannot observe true
/// charge), per-node residual statistics, and the pending forecasts they
/// are computed from.
class GlobalController {
 public:
  GlobalController(const RadialNetwork& net, std::map<int, BatterySpec> specs,
                   GCConfig cfg, std::uint64_t seed)
      : net_(net), specs_(std::move(specs)), cfg_(cfg), seed_(seed) {
    for (const auto& [node, sp] : specs_)
      shadow_q_[node] = cfg_.initial_soc_frac * sp.q_max_kwh;
    trackers_.resize(static_cast<std::size_t>(net.n_buses()));
  }

  const std::vector<GCCycleDiagnostics>& diagnostics() const { return diags_; }
  const std::map<int, double>& shadow_q() const { return shadow_q_; }

  /// One Algorithm-1 GC cycle at time `now`. `buffered` holds per-bus
  /// uncontrollable net load for steps [0, now - delta_gc). Throws
  /// InsufficientHistory until enough data exists for the forecaster.
  std::map<int, GlobalPlan> run_cycle(
      long now, const std::vector<std::vector<double>>& buffered,
      const std::vector<std::vector<double>>* artificial_truth = nullptr,
      double sigma = 0.0, const std::map<int, double>* true_q = nullptr) {
    const int nb = net_.n_buses();
    const int H = cfg_.horizon();
    const long cutoff = now - cfg_.delta_gc;
    if (static_cast<int>(buffered.size()) != nb)
      throw ShapeMismatch("buffered history must cover every bus");
    for (const auto& row : buffered)
      if (static_cast<long>(row.size()) != cutoff)
        throw ValueError("buffered history must end exactly delta_gc ago");

    roll_shadow_state(now);
    absorb_residuals(buffered, cutoff);

    // Point forecast for [now, now + H) per bus.
    std::vector<std::vector<double>> point;
    if (artificial_truth) {
      point.resize(static_cast<std::size_t>(nb));
      for (int b = 0; b < nb; ++b) {
        const auto& full = (*artificial_truth)[static_cast<std::size_t>(b)];
        if (static_cast<long>(full.size()) < now + H)
          throw ValueError("truth series too short for artificial forecaster");
        std::vector<double> window(full.begin() + now, full.begin() + now + H);
        point[static_cast<std::size_t>(b)] = forecast_artificial(
            window, sigma,
            derive_seed(seed_, 0x6c01u, static_cast<std::uint64_t>(now),
                        static_cast<std::uint64_t>(b)),
            cfg_.delta_gc);
      }
    } else {
      ForecastRequest req;
      req.history = buffered;
      req.horizon = cfg_.delta_gc + H;  // bridge the buffering gap, keep tail
      req.n_scenarios = cfg_.n_scenarios;
      auto bridged = forecast_seasonal(req);
      point.resize(static_cast<std::size_t>(nb));
      for (int b = 0; b < nb; ++b)
        point[static_cast<std::size_t>(b)] = std::vector<double>(
            bridged[static_cast<std::size_t>(b)].begin() + cfg_.delta_gc,
            bridged[static_cast<std::size_t>(b)].end());
    }

    // Scenario fan around the point forecast, residual stats per lead.
    std::vector<ResidualProfile> profiles(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      ResidualProfile full =
          trackers_[static_cast<std::size_t>(b)].profile(cfg_.delta_gc + H);
      ResidualProfile sliced;
      sliced.mean.assign(full.mean.begin() + cfg_.delta_gc, full.mean.end());
      sliced.stddev.assign(full.stddev.begin() + cfg_.delta_gc,
                           full.stddev.end());
      profiles[static_cast<std::size_t>(b)] = std::move(sliced);
    }
    ScenarioSet scen = generate_scenarios(
        point, profiles, cfg_.n_scenarios,
        derive_seed(seed_, 0x5ce0u, static_cast<std::uint64_t>(now)));

    pending_.push_back({now, point});

    // Fan out the per-scenario network solves, then average net loads.
    std::vector<GlobalSolveResult> results(
        static_cast<std::size_t>(cfg_.n_scenarios));
    parallel_for(static_cast<std::size_t>(cfg_.n_scenarios), cfg_.workers,
                 [&](std::size_t g) {
                   results[g] = solve_global(net_, specs_, scen.scenarios[g],
                                             now, shadow_q_, cfg_);
                 });
    std::vector<std::map<int, std::vector<double>>> nets, us;
    double obj_acc = 0.0;
    for (auto& r : results) {
      nets.push_back(r.net_load_kw);
      us.push_back(r.u_kw);
      obj_acc += r.objective;
    }
    auto x_avg = average_profiles(nets);
    last_u_mean_ = average_profiles(us);
    last_issued_ = now;

    // Scenario-mean net loads pin the non-storage buses in the bounds
    // problems; storage buses follow the averaged optimal profile.
    std::vector<std::vector<double>> pinned(
        static_cast<std::size_t>(nb),
        std::vector<double>(static_cast<std::size_t>(H), 0.0));
    for (int b = 0; b < nb; ++b) {
      for (int t = 0; t < H; ++t) {
        double acc = 0.0;
        for (const auto& s : scen.scenarios)
          acc += s[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        pinned[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] =
            acc / static_cast<double>(cfg_.n_scenarios);
      }
    }
    for (const auto& [node, series] : x_avg)
      pinned[static_cast<std::size_t>(node)] = series;

    std::vector<int> nodes;
    for (const auto& [node, sp] : specs_) nodes.push_back(node);
    const std::size_t n_tasks = nodes.size() * static_cast<std::size_t>(H) * 2;
    std::vector<double> bound_vals(n_tasks, 0.0);
    parallel_for(n_tasks, cfg_.workers, [&](std::size_t task) {
      std::size_t k = task / (static_cast<std::size_t>(H) * 2);
      std::size_t rest = task % (static_cast<std::size_t>(H) * 2);
      int t = static_cast<int>(rest / 2);
      BoundDir dir = (rest % 2 == 0) ? BoundDir::lower : BoundDir::upper;
      std::vector<double> pin_t(static_cast<std::size_t>(nb));
      std::vector<double> react_t(static_cast<std::size_t>(nb));
      for (int b = 0; b < nb; ++b) {
        pin_t[static_cast<std::size_t>(b)] =
            pinned[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        // reactive rides on the uncontrollable forecast, storage is real-only
        double d_mean = 0.0;
        for (const auto& s : scen.scenarios)
          d_mean += s[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        d_mean /= static_cast<double>(cfg_.n_scenarios);
        react_t[static_cast<std::size_t>(b)] =
            d_mean * net_.buses()[static_cast<std::size_t>(b)].tan_phi();
      }
      bound_vals[task] =
          solve_bounds(net_, nodes[k], pin_t, react_t, dir, cfg_);
    });

    GCCycleDiagnostics diag;
    diag.issued_at = now;
    diag.shadow_q_kwh = shadow_q_;
    if (true_q) diag.true_q_kwh = *true_q;
    diag.mean_scenario_objective =
        obj_acc / static_cast<double>(cfg_.n_scenarios);

    std::map<int, GlobalPlan> plans;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      GlobalPlan plan;
      plan.node = nodes[k];
      plan.issued_at = now;
      plan.profile = x_avg[nodes[k]];
      plan.lower.resize(static_cast<std::size_t>(H));
      plan.upper.resize(static_cast<std::size_t>(H));
      for (int t = 0; t < H; ++t) {
        std::size_t base_ix = k * static_cast<std::size_t>(H) * 2 +
                              static_cast<std::size_t>(t) * 2;
        double lo = bound_vals[base_ix];
        double hi = bound_vals[base_ix + 1];
        if (lo > hi) std::swap(lo, hi);
        plan.lower[static_cast<std::size_t>(t)] = lo;
        plan.upper[static_cast<std::size_t>(t)] = hi;
        double& x = plan.profile[static_cast<std::size_t>(t)];
        double clamped = std::clamp(x, lo, hi);
        diag.max_profile_clamp_kw =
            std::max(diag.max_profile_clamp_kw, std::abs(clamped - x));
        x = clamped;
      }
      plan.validate();
      plans[nodes[k]] = std::move(plan);
    }
    diags_.push_back(std::move(diag));
    return plans;
  }

 private:
  void roll_shadow_state(long now) {
    if (last_issued_ < 0) return;
    long steps = std::min<long>(now - last_issued_, cfg_.delta_gc);
    for (auto& [node, q] : shadow_q_) {
      const BatterySpec& sp = specs_.at(node);
      const auto& u = last_u_mean_.at(node);
      for (long t = 0; t < steps; ++t) {
        q = sp.leakage * q + u[static_cast<std::size_t>(t)] * cfg_.delta_h;
        q = std::clamp(q, sp.q_min_kwh, sp.q_max_kwh);
      }
    }
  }

  void absorb_residuals(const std::vector<std::vector<double>>& buffered,
                        long cutoff) {
    for (auto& rec : pending_) {
      long cutoff_then = rec.issued_at - cfg_.delta_gc;
      for (std::size_t b = 0; b < rec.point.size(); ++b) {
        auto& series = rec.point[b];
        for (std::size_t j = rec.consumed; j < series.size(); ++j) {
          long abs_step = rec.issued_at + static_cast<long>(j);
          if (abs_step >= cutoff) break;
          int lead = static_cast<int>(abs_step - cutoff_then);
          trackers_[b].record(
              lead, buffered[b][static_cast<std::size_t>(abs_step)] - series[j]);
        }
      }
      long done = std::min<long>(static_cast<long>(rec.point[0].size()),
                                 std::max<long>(0, cutoff - rec.issued_at));
      rec.consumed = static_cast<std::size_t>(done);
    }
    std::erase_if(pending_, [&](const PendingForecast& rec) {
      return rec.consumed >= rec.point[0].size();
    });
  }

  struct PendingForecast {
    long issued_at = 0;
    std::vector<std::vector<double>> point;
    std::size_t consumed = 0;
  };

  const RadialNetwork& net_;
  std::map<int, BatterySpec> specs_;
  GCConfig cfg_;
  std::uint64_t seed_;
  std::map<int, double> shadow_q_;
  std::map<int, std::vector<double>> last_u_mean_;
  long last_issued_ = -1;
  std::vector<ResidualTracker> trackers_;
  std::vector<PendingForecast> pending_;
  std::vector<GCCycleDiagnostics> diags_;
};

}  // namespace dercoord
