#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <vector>

#include "dercoord/common.hpp"
#include "dercoord/forecast.hpp"
#include "dercoord/global_controller.hpp"
#include "dercoord/local_controller.hpp"
#include "dercoord/network.hpp"
#include "dercoord/opf.hpp"
#include "dercoord/parallel.hpp"
#include "dercoord/storage.hpp"
#include "dercoord/tariff.hpp"

namespace dercoord {

struct DeploymentPlan {
  double solar_penetration = 0.0;    // fraction of total demand energy
  double storage_penetration = 0.0;  // fraction of mean daily demand energy
  double der_node_fraction = 0.0;    // fraction of nonzero-load nodes equipped

  void validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(solar_penetration) || !in01(storage_penetration) ||
        !in01(der_node_fraction))
      throw ValueError("deployment fractions must be in [0,1]");
  }
};

/// Realized deployment: which nodes got equipment and how much.
struct Deployment {
  std::vector<int> nodes;  // sorted
  std::map<int, double> solar_peak_kw;
  std::map<int, double> q_max_kwh;
};

struct TruthData {
  std::vector<std::vector<double>> demand_kw;  // [bus][step]
  std::vector<std::vector<double>> solar_kw;   // [bus][step]
  int days = 0;
  int steps() const {
    return demand_kw.empty() ? 0 : static_cast<int>(demand_kw[0].size());
  }
  std::vector<std::vector<double>> net_load_kw() const {
    std::vector<std::vector<double>> out(demand_kw.size());
    for (std::size_t b = 0; b < demand_kw.size(); ++b) {
      out[b].resize(demand_kw[b].size());
      for (std::size_t t = 0; t < demand_kw[b].size(); ++t)
        out[b][t] = demand_kw[b][t] - solar_kw[b][t];
    }
    return out;
  }
};

struct TruthBundle {
  TruthData truth;
  Deployment deployment;
};

/// Clear-sky bell: normalized solar output by hour of day, zero outside
/// (6, 18), peak 1 at noon.
inline double clear_sky_bell(int hour_of_day) {
  double h = static_cast<double>(hour_of_day);
  if (h <= 6.0 || h >= 18.0) return 0.0;
  double s = std::sin(M_PI * (h - 6.0) / 12.0);
  return s * s * s * s;
}

inline double clear_sky_day_energy() {
  double acc = 0.0;
  for (int h = 0; h < 24; ++h) acc += clear_sky_bell(h);
  return acc;
}

namespace detail {

inline double circular_hour_distance(double a, double b) {
  double d = std::abs(a - b);
  return std::min(d, 24.0 - d);
}

/// Aggregated household demand: base plus morning and evening diurnal
/// bumps with multiplicative lognormal noise, scaled to the bus peak.
inline std::vector<double> synth_bus_demand(double peak_kw, int steps,
                                            std::uint64_t seed) {
  std::vector<double> total(static_cast<std::size_t>(steps), 0.0);
  if (peak_kw <= 0) return total;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int homes = std::max(1, static_cast<int>(std::lround(peak_kw / 4.0)));
  const double noise_sigma = 0.25;
  for (int hme = 0; hme < homes; ++hme) {
    double base = 0.15 + 0.20 * uni(rng);
    double m_amp = 0.20 + 0.30 * uni(rng);
    double e_amp = 0.60 + 0.40 * uni(rng);
    double m_center = 7.0 + 2.0 * uni(rng);
    double e_center = 18.0 + 2.5 * uni(rng);
    for (int t = 0; t < steps; ++t) {
      double h = static_cast<double>(t % 24);
      double dm = circular_hour_distance(h, m_center);
      double de = circular_hour_distance(h, e_center);
      double shape = base + m_amp * std::exp(-0.5 * dm * dm / (2.0 * 2.0)) +
                     e_amp * std::exp(-0.5 * de * de / (2.8 * 2.8));
      double noise =
          std::exp(noise_sigma * gauss(rng) - 0.5 * noise_sigma * noise_sigma);
      total[static_cast<std::size_t>(t)] += shape * noise;
    }
  }
  double peak = 0.0;
  for (double v : total) peak = std::max(peak, v);
  double scale = peak_kw / peak;
  for (double& v : total) v *= scale;
  return total;
}

}  // namespace detail

/// Samples the DER node set and splits the network-level solar/storage
/// totals across it in proportion to each chosen node's peak load.
inline Deployment assign_ders(const RadialNetwork& net, const DeploymentPlan& plan,
                              const std::vector<std::vector<double>>& demand_kw,
                              int days, std::uint64_t seed) {
  plan.validate();
  Deployment dep;
  if (plan.solar_penetration == 0 && plan.storage_penetration == 0 &&
      plan.der_node_fraction == 0)
    return dep;
  std::vector<int> eligible;
  for (const Bus& b : net.buses())
    if (b.peak_load_kw > 0) eligible.push_back(b.id);
  std::size_t want = static_cast<std::size_t>(
      std::ceil(plan.der_node_fraction * static_cast<double>(eligible.size())));
  if (want == 0)
    throw EmptySelection("der_node_fraction selects no nodes");
  if (eligible.empty()) throw EmptySelection("no nonzero-load nodes");
  want = std::min(want, eligible.size());

  // Fisher-Yates prefix with explicit bounded draws so the choice only
  // depends on the seed.
  std::mt19937_64 rng(derive_seed(seed, 0xde9107u));
  for (std::size_t i = 0; i < want; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  dep.nodes.assign(eligible.begin(), eligible.begin() + static_cast<long>(want));
  std::sort(dep.nodes.begin(), dep.nodes.end());

  double total_energy = 0.0;
  const int horizon = days * 24;
  for (const auto& series : demand_kw)
    for (int t = 0; t < std::min<int>(horizon, static_cast<int>(series.size())); ++t)
      total_energy += series[static_cast<std::size_t>(t)];
  double chosen_load = 0.0;
  for (int n : dep.nodes)
    chosen_load += net.buses()[static_cast<std::size_t>(n)].peak_load_kw;
  const double solar_energy_total = plan.solar_penetration * total_energy;
  const double q_total = plan.storage_penetration * total_energy / days;
  const double bell_energy = clear_sky_day_energy();
  for (int n : dep.nodes) {
    double share =
        net.buses()[static_cast<std::size_t>(n)].peak_load_kw / chosen_load;
    if (plan.solar_penetration > 0)
      dep.solar_peak_kw[n] = share * solar_energy_total / (bell_energy * days);
    if (plan.storage_penetration > 0) dep.q_max_kwh[n] = share * q_total;
  }
  return dep;
}

/// Synthesizes the world: per-bus demand, the DER deployment, and per-node
/// solar with 5%-of-peak gaussian noise, zero outside clear-sky support.
/// Arrays carry `pad_steps` beyond days*24 so every MPC horizon is covered.
inline TruthBundle generate_truth(const RadialNetwork& net,
                                  const DeploymentPlan& plan, int days,
                                  std::uint64_t seed, int pad_steps = 72) {
  const int nb = net.n_buses();
  const int steps = days * 24 + pad_steps;
  TruthBundle out;
  out.truth.days = days;
  out.truth.demand_kw.resize(static_cast<std::size_t>(nb));
  out.truth.solar_kw.assign(static_cast<std::size_t>(nb),
                            std::vector<double>(static_cast<std::size_t>(steps), 0.0));
  for (int b = 0; b < nb; ++b)
    out.truth.demand_kw[static_cast<std::size_t>(b)] = detail::synth_bus_demand(
        net.buses()[static_cast<std::size_t>(b)].peak_load_kw, steps,
        derive_seed(seed, 0xd3a4d0u, static_cast<std::uint64_t>(b)));

  out.deployment = assign_ders(net, plan, out.truth.demand_kw, days, seed);

  for (const auto& [node, peak] : out.deployment.solar_peak_kw) {
    std::mt19937_64 rng(derive_seed(seed, 0x501a9u, static_cast<std::uint64_t>(node)));
    std::normal_distribution<double> gauss(0.0, 0.05 * peak);
    auto& series = out.truth.solar_kw[static_cast<std::size_t>(node)];
    for (int t = 0; t < steps; ++t) {
      double bell = clear_sky_bell(t % 24);
      if (bell > 0.0)
        series[static_cast<std::size_t>(t)] =
            std::max(0.0, peak * bell + gauss(rng));
    }
  }
  return out;
}

/// Access-audited view of the smart-meter archive. The GC can only obtain
/// series truncated delta_gc steps in the past; an LC can only obtain its
/// own node. Every access is recorded so tests can prove the information
/// constraints were honored.
class MeterBus {
 public:
  struct GcRead {
    long now;
    long newest_exclusive;
  };
  struct LcRead {
    int requester;
    int node;
    long now;
  };
  struct AccessLog {
    std::vector<GcRead> gc_reads;
    std::vector<LcRead> lc_reads;
    long cross_node_reads = 0;
  };

  MeterBus(std::vector<std::vector<double>> net_load_kw, int delta_gc)
      : series_(std::move(net_load_kw)), delta_gc_(delta_gc) {}

  std::vector<std::vector<double>> gc_history(long now) {
    long cutoff = std::max<long>(0, now - delta_gc_);
    {
      std::lock_guard<std::mutex> lock(mu_);
      log_.gc_reads.push_back({now, cutoff});
    }
    std::vector<std::vector<double>> out(series_.size());
    for (std::size_t b = 0; b < series_.size(); ++b)
      out[b].assign(series_[b].begin(), series_[b].begin() + cutoff);
    return out;
  }

  std::vector<double> lc_history(int node, long now, int requester) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      log_.lc_reads.push_back({requester, node, now});
      if (node != requester) ++log_.cross_node_reads;
    }
    const auto& s = series_[static_cast<std::size_t>(node)];
    return std::vector<double>(s.begin(), s.begin() + now);
  }

  const AccessLog& access_log() const { return log_; }

 private:
  std::vector<std::vector<double>> series_;
  int delta_gc_;
  AccessLog log_;
  std::mutex mu_;
};

/// Autonomous profit-seeking policy: charge at one constant rate over the
/// off-peak part of the clear-sky window, discharge at another constant
/// rate over the ToU peak window. Battery bounds hold by construction.
inline std::vector<double> baseline_uncoordinated(const BatterySpec& spec,
                                                  const TouTariff& tariff,
                                                  double q0_kwh, int steps) {
  std::vector<int> charge_hours;
  for (int h = 0; h < 24; ++h)
    if (clear_sky_bell(h) > 0.0 && (h < tariff.peak_start_hour || h >= tariff.peak_end_hour))
      charge_hours.push_back(h);
  std::vector<double> u(static_cast<std::size_t>(steps), 0.0);
  if (spec.q_max_kwh <= 0) return u;
  double q = q0_kwh;
  double rate_c = 0.0, rate_d = 0.0;
  for (int t = 0; t < steps; ++t) {
    int h = t % 24;
    bool charging = std::find(charge_hours.begin(), charge_hours.end(), h) !=
                    charge_hours.end();
    bool discharging = h >= tariff.peak_start_hour && h < tariff.peak_end_hour;
    if (charging && (t == 0 || h == charge_hours.front()))
      rate_c = std::min(spec.u_max_kw,
                        (spec.q_max_kwh - q) / static_cast<double>(charge_hours.size()));
    if (discharging && h == tariff.peak_start_hour)
      rate_d = std::min(-spec.u_min_kw,
                        q / static_cast<double>(tariff.peak_hours()));
    double ut = 0.0;
    if (charging)
      ut = std::min(rate_c, spec.q_max_kwh - spec.leakage * q);
    else if (discharging)
      ut = -std::min(rate_d, spec.leakage * q - spec.q_min_kwh);
    q = spec.leakage * q + ut;
    u[static_cast<std::size_t>(t)] = ut;
  }
  return u;
}

enum class ControllerKind { two_layer, uncoordinated, none };

inline ControllerKind controller_from_string(const std::string& s) {
  if (s == "two_layer") return ControllerKind::two_layer;
  if (s == "uncoordinated") return ControllerKind::uncoordinated;
  if (s == "none") return ControllerKind::none;
  throw ConfigError("unknown controller: " + s);
}

struct SimOptions {
  int warmup_steps = 96;
  int workers = 1;
  std::optional<double> sigma;  // artificial forecaster accuracy when set
  std::optional<std::filesystem::path> out_dir;
  double battery_hours = 4.0;
  double leakage = 1.0;
  double initial_soc_frac = 0.5;
};

struct SimResult {
  SimMetrics metrics;
  double max_profit_oracle = 0.0;
  double profile_deviation_kw = 0.0;
  std::uint64_t truth_hash = 0;
  MeterBus::AccessLog access;
  std::vector<GCCycleDiagnostics> gc_diagnostics;
  std::vector<int> unit_nodes;
  std::vector<std::vector<double>> voltages;     // [step][bus]
  std::vector<std::vector<double>> actions_kw;   // [step][unit]
  std::vector<std::vector<double>> charges_kwh;  // [step][unit]
  long steps = 0;
  long lc_fallbacks = 0;
};

namespace detail {

inline std::uint64_t hash_series(const std::vector<std::vector<double>>& a,
                                 std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (const auto& row : a)
    for (double v : row) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int k = 0; k < 8; ++k) {
        h ^= (bits >> (8 * k)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

}  // namespace detail

/// Algorithm-1 event loop. Every delta_gc steps the GC re-plans on data
/// lagged by delta_gc; every step each LC acts on fresh local data; the
/// plant applies actions and true voltages come from the AC oracle on
/// realized injections, never from the relaxation.
inline SimResult run_simulation(const RadialNetwork& net, const TruthBundle& world,
                                GCConfig gc_cfg, LCConfig lc_cfg,
                                const TouTariff& tariff, ControllerKind kind,
                                std::uint64_t seed, const SimOptions& opt) {
  const int nb = net.n_buses();
  const long steps = static_cast<long>(world.truth.days) * 24;
  if (world.truth.steps() < steps + gc_cfg.horizon() - gc_cfg.delta_gc)
    throw ValueError("truth arrays too short for the MPC horizon");
  gc_cfg.workers = opt.workers;
  gc_cfg.initial_soc_frac = opt.initial_soc_frac;
  gc_cfg.tariff = tariff;
  lc_cfg.tariff = tariff;
  lc_cfg.delta_f = gc_cfg.delta_f;

  // Storage fleet from the deployment.
  std::map<int, BatterySpec> specs;
  std::map<int, BatteryState> states;
  std::vector<int> unit_nodes;
  for (const auto& [node, q_max] : world.deployment.q_max_kwh) {
    if (q_max <= 0) continue;
    BatterySpec sp;
    sp.q_max_kwh = q_max;
    sp.q_min_kwh = 0.0;
    sp.u_max_kw = q_max / opt.battery_hours;
    sp.u_min_kw = -q_max / opt.battery_hours;
    sp.leakage = opt.leakage;
    specs[node] = sp;
    states[node] = BatteryState{opt.initial_soc_frac * q_max, node};
    unit_nodes.push_back(node);
  }
  const std::size_t n_units = unit_nodes.size();

  auto net_load = world.truth.net_load_kw();
  MeterBus meter(net_load, gc_cfg.delta_gc);

  std::optional<GlobalController> gc;
  std::vector<LocalController> lcs;
  std::map<int, GlobalPlan> plans;
  const bool coordinated = kind == ControllerKind::two_layer && n_units > 0;
  if (coordinated) {
    gc.emplace(net, specs, gc_cfg, derive_seed(seed, 0x6cu));
    for (std::size_t k = 0; k < n_units; ++k)
      lcs.emplace_back(unit_nodes[k], specs.at(unit_nodes[k]), lc_cfg,
                       derive_seed(seed, 0x1cu,
                                   static_cast<std::uint64_t>(unit_nodes[k])));
  }
  std::vector<std::vector<double>> baseline_u(n_units);
  if (kind == ControllerKind::uncoordinated) {
    for (std::size_t k = 0; k < n_units; ++k)
      baseline_u[k] = baseline_uncoordinated(
          specs.at(unit_nodes[k]), tariff,
          opt.initial_soc_frac * specs.at(unit_nodes[k]).q_max_kwh,
          static_cast<int>(steps));
  }

  SimResult out;
  out.unit_nodes = unit_nodes;
  out.steps = steps;
  out.voltages.assign(static_cast<std::size_t>(steps),
                      std::vector<double>(static_cast<std::size_t>(nb), 1.0));
  out.actions_kw.assign(static_cast<std::size_t>(steps),
                        std::vector<double>(n_units, 0.0));
  out.charges_kwh.assign(static_cast<std::size_t>(steps),
                         std::vector<double>(n_units, 0.0));

  const double base = net.base_power_kva();
  for (long t = 0; t < steps; ++t) {
    // --- GC cadence ---
    if (coordinated && t % gc_cfg.delta_gc == 0 && t >= gc_cfg.delta_gc) {
      auto buffered = meter.gc_history(t);
      if (static_cast<int>(buffered[0].size()) >= kSeasonalMinHistory) {
        std::map<int, double> true_q;
        for (const auto& [node, st] : states) true_q[node] = st.q_kwh;
        auto fresh = gc->run_cycle(
            t, buffered, opt.sigma ? &net_load : nullptr,
            opt.sigma.value_or(0.0), &true_q);
        // The plan file is the sole GC->LC channel; round-trip through the
        // serialized form (and persist it when an output dir is set).
        nlohmann::json jplans = nlohmann::json::array();
        for (const auto& [node, plan] : fresh) jplans.push_back(plan.to_json());
        if (opt.out_dir) {
          std::filesystem::create_directories(*opt.out_dir / "plans");
          std::ofstream f(*opt.out_dir /
                          ("plans/plan_" + std::to_string(t) + ".json"));
          f << jplans.dump(2) << "\n";
        }
        plans.clear();
        for (const auto& jp : jplans) {
          GlobalPlan p = GlobalPlan::from_json(jp);
          plans[p.node] = std::move(p);
        }
      }
    }

    // --- LC cadence (independent nodes, concurrent) ---
    std::vector<double> u_exec(n_units, 0.0);
    if (coordinated) {
      std::vector<long> fallback_flags(n_units, 0);
      parallel_for(n_units, opt.workers, [&](std::size_t k) {
        int node = unit_nodes[k];
        auto it = plans.find(node);
        if (it == plans.end()) return;  // no plan yet: idle
        const GlobalPlan& plan = it->second;
        if (t - plan.issued_at >= gc_cfg.delta_gc) return;
        auto hist = meter.lc_history(node, t, node);
        const std::vector<double>* art =
            opt.sigma ? &net_load[static_cast<std::size_t>(node)] : nullptr;
        LCDecision dec =
            lcs[k].step(t, hist, plan, gc_cfg.delta_gc, states.at(node).q_kwh,
                        art, opt.sigma.value_or(0.0));
        u_exec[k] = dec.u_now_kw;
        if (dec.fallback) fallback_flags[k] = 1;
      });
      for (long f : fallback_flags) out.lc_fallbacks += f;
    } else if (kind == ControllerKind::uncoordinated) {
      for (std::size_t k = 0; k < n_units; ++k)
        u_exec[k] = baseline_u[k][static_cast<std::size_t>(t)];
    }

    // --- plant update ---
    for (std::size_t k = 0; k < n_units; ++k) {
      int node = unit_nodes[k];
      states[node] = step_simple(states.at(node), u_exec[k], gc_cfg.delta_h,
                                 specs.at(node));
      out.actions_kw[static_cast<std::size_t>(t)][k] = u_exec[k];
      out.charges_kwh[static_cast<std::size_t>(t)][k] = states.at(node).q_kwh;
    }

    std::vector<std::complex<double>> inj(static_cast<std::size_t>(nb));
    for (int b = 1; b < nb; ++b) {
      double load = net_load[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
      for (std::size_t k = 0; k < n_units; ++k)
        if (unit_nodes[k] == b) load += u_exec[k];
      double p = -load / base;
      double q = -net_load[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] *
                 net.buses()[static_cast<std::size_t>(b)].tan_phi() / base;
      inj[static_cast<std::size_t>(b)] = {p, q};
    }

    const double price = price_at(t, gc_cfg.delta_h, tariff);
    const bool counted = t >= opt.warmup_steps;
    try {
      PowerFlowSolution pf = solve_ac_oracle(net, inj);
      for (int b = 0; b < nb; ++b)
        out.voltages[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)] =
            std::abs(pf.voltages[static_cast<std::size_t>(b)]);
      if (counted) {
        for (int b = 0; b < nb; ++b)
          out.metrics.sq_volt_dev += hinge_sq_deviation(
              out.voltages[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)]);
        out.metrics.energy_cost +=
            price * pf.slack_power.real() * base * gc_cfg.delta_h;
      }
    } catch (const NoConvergence&) {
      if (counted) ++out.metrics.violation_count;
      for (int b = 0; b < nb; ++b)
        out.voltages[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)] =
            std::numeric_limits<double>::quiet_NaN();
    }

    if (counted) {
      ++out.metrics.counted_steps;
      for (std::size_t k = 0; k < n_units; ++k)
        out.metrics.arbitrage_profit += price * (-u_exec[k]) * gc_cfg.delta_h;
      for (std::size_t k = 0; k < n_units; ++k) {
        auto it = plans.find(unit_nodes[k]);
        if (it == plans.end()) continue;
        long rel = t - it->second.issued_at;
        if (rel < 0 || rel >= static_cast<long>(it->second.profile.size()))
          continue;
        double z = net_load[static_cast<std::size_t>(unit_nodes[k])]
                           [static_cast<std::size_t>(t)] +
                   u_exec[k];
        out.profile_deviation_kw +=
            std::abs(z - it->second.profile[static_cast<std::size_t>(rel)]);
      }
    }
  }

  if (gc) out.gc_diagnostics = gc->diagnostics();
  out.access = meter.access_log();
  out.truth_hash =
      detail::hash_series(world.truth.solar_kw,
                          detail::hash_series(world.truth.demand_kw));
  std::vector<BatterySpec> spec_list;
  for (const auto& [node, sp] : specs) spec_list.push_back(sp);
  int counted_days = static_cast<int>((steps - opt.warmup_steps) / 24);
  out.max_profit_oracle =
      max_arbitrage_oracle(spec_list, tariff, std::max(counted_days, 0));
  return out;
}

}  // namespace dercoord
