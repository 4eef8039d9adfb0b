#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dercoord/common.hpp"
#include "dercoord/network.hpp"
#include "dercoord/parallel.hpp"
#include "dercoord/sim.hpp"

namespace dercoord {

/// One batch run: everything needed to reproduce it bitwise. Defaults
/// mirror the headline experiment settings.
struct RunConfig {
  std::string network;
  int days = 30;
  double delta_min_h = 1.0;
  int delta_gc = 24;
  int delta_f = 48;
  double lambda = 1000.0;
  double v_tol_plus = 1.045;
  double v_tol_minus = 0.955;
  double gamma = 100.0;
  int global_scenarios = 24;
  int local_scenarios = 10;
  TouTariff tariff;
  DeploymentPlan deployment;
  std::string controller = "two_layer";
  std::optional<double> sigma;
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "out";
  int workers = 0;  // 0 = all cores
  double battery_hours = 4.0;
  double leakage = 1.0;
  double initial_soc_frac = 0.5;
  int warmup_steps = 96;
  double solver_eps_abs = 1e-5;
  double solver_eps_rel = 1e-5;
  int solver_max_iters = 50000;

  GCConfig gc_config() const {
    GCConfig g;
    g.delta_gc = delta_gc;
    g.delta_f = delta_f;
    g.n_scenarios = global_scenarios;
    g.lambda = lambda;
    g.vtol_plus = v_tol_plus;
    g.vtol_minus = v_tol_minus;
    g.tariff = tariff;
    g.delta_h = delta_min_h;
    g.initial_soc_frac = initial_soc_frac;
    g.solver.eps_abs = solver_eps_abs;
    g.solver.eps_rel = solver_eps_rel;
    g.solver.max_iters = solver_max_iters;
    g.solver.rho = 0.5;  // tuned for the OPF program class
    return g;
  }
  LCConfig lc_config() const {
    LCConfig l;
    l.gamma = gamma;
    l.n_scenarios = local_scenarios;
    l.delta_f = delta_f;
    l.delta_h = delta_min_h;
    l.tariff = tariff;
    l.solver.eps_abs = solver_eps_abs;
    l.solver.eps_rel = solver_eps_rel;
    l.solver.max_iters = solver_max_iters;
    l.solver.rho = 0.5;
    return l;
  }
  SimOptions sim_options() const {
    SimOptions o;
    o.warmup_steps = warmup_steps;
    o.workers = workers > 0 ? workers : default_workers();
    o.sigma = sigma;
    o.battery_hours = battery_hours;
    o.leakage = leakage;
    o.initial_soc_frac = initial_soc_frac;
    return o;
  }
};

namespace detail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<T>();
}

inline void check_known(const nlohmann::json& j,
                        std::initializer_list<const char*> keys,
                        const char* what) {
  if (!j.is_object())
    throw ConfigError(std::string(what) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(std::string(what) + ": unknown field '" + it.key() + "'");
  }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::check_known(
      j,
      {"network", "days", "delta_min_h", "delta_gc", "delta_f", "lambda",
       "v_tol_plus", "v_tol_minus", "gamma", "global_scenarios",
       "local_scenarios", "tariff", "deployment", "controller", "sigma",
       "seeds", "out_dir", "workers", "battery_hours", "leakage",
       "initial_soc_frac", "warmup_steps", "solver_eps_abs", "solver_eps_rel",
       "solver_max_iters"},
      "config");
  RunConfig c;
  if (!j.contains("network"))
    throw ConfigError("config: missing required field 'network'");
  c.network = j.at("network").get<std::string>();
  detail::take(j, "days", c.days);
  detail::take(j, "delta_min_h", c.delta_min_h);
  detail::take(j, "delta_gc", c.delta_gc);
  detail::take(j, "delta_f", c.delta_f);
  detail::take(j, "lambda", c.lambda);
  detail::take(j, "v_tol_plus", c.v_tol_plus);
  detail::take(j, "v_tol_minus", c.v_tol_minus);
  detail::take(j, "gamma", c.gamma);
  detail::take(j, "global_scenarios", c.global_scenarios);
  detail::take(j, "local_scenarios", c.local_scenarios);
  if (j.contains("tariff")) {
    const auto& jt = j.at("tariff");
    detail::check_known(
        jt, {"peak_price", "offpeak_price", "peak_start_hour", "peak_end_hour"},
        "tariff");
    detail::take(jt, "peak_price", c.tariff.peak_price);
    detail::take(jt, "offpeak_price", c.tariff.offpeak_price);
    detail::take(jt, "peak_start_hour", c.tariff.peak_start_hour);
    detail::take(jt, "peak_end_hour", c.tariff.peak_end_hour);
  }
  if (j.contains("deployment")) {
    const auto& jd = j.at("deployment");
    detail::check_known(
        jd, {"solar_penetration", "storage_penetration", "der_node_fraction"},
        "deployment");
    detail::take(jd, "solar_penetration", c.deployment.solar_penetration);
    detail::take(jd, "storage_penetration", c.deployment.storage_penetration);
    detail::take(jd, "der_node_fraction", c.deployment.der_node_fraction);
  }
  detail::take(j, "controller", c.controller);
  if (j.contains("sigma") && !j.at("sigma").is_null())
    c.sigma = j.at("sigma").get<double>();
  detail::take(j, "seeds", c.seeds);
  detail::take(j, "out_dir", c.out_dir);
  detail::take(j, "workers", c.workers);
  detail::take(j, "battery_hours", c.battery_hours);
  detail::take(j, "leakage", c.leakage);
  detail::take(j, "initial_soc_frac", c.initial_soc_frac);
  detail::take(j, "warmup_steps", c.warmup_steps);
  detail::take(j, "solver_eps_abs", c.solver_eps_abs);
  detail::take(j, "solver_eps_rel", c.solver_eps_rel);
  detail::take(j, "solver_max_iters", c.solver_max_iters);
  c.tariff.validate();
  c.deployment.validate();
  controller_from_string(c.controller);
  if (c.seeds.empty()) throw ConfigError("config: seeds must be nonempty");
  return c;
}

/// Every field materialized, defaults included, so a rerun from the echo
/// reproduces the run bitwise.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["network"] = c.network;
  j["days"] = c.days;
  j["delta_min_h"] = c.delta_min_h;
  j["delta_gc"] = c.delta_gc;
  j["delta_f"] = c.delta_f;
  j["lambda"] = c.lambda;
  j["v_tol_plus"] = c.v_tol_plus;
  j["v_tol_minus"] = c.v_tol_minus;
  j["gamma"] = c.gamma;
  j["global_scenarios"] = c.global_scenarios;
  j["local_scenarios"] = c.local_scenarios;
  j["tariff"] = {{"peak_price", c.tariff.peak_price},
                 {"offpeak_price", c.tariff.offpeak_price},
                 {"peak_start_hour", c.tariff.peak_start_hour},
                 {"peak_end_hour", c.tariff.peak_end_hour}};
  j["deployment"] = {{"solar_penetration", c.deployment.solar_penetration},
                     {"storage_penetration", c.deployment.storage_penetration},
                     {"der_node_fraction", c.deployment.der_node_fraction}};
  j["controller"] = c.controller;
  if (c.sigma)
    j["sigma"] = *c.sigma;
  else
    j["sigma"] = nullptr;
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["workers"] = c.workers;
  j["battery_hours"] = c.battery_hours;
  j["leakage"] = c.leakage;
  j["initial_soc_frac"] = c.initial_soc_frac;
  j["warmup_steps"] = c.warmup_steps;
  j["solver_eps_abs"] = c.solver_eps_abs;
  j["solver_eps_rel"] = c.solver_eps_rel;
  j["solver_max_iters"] = c.solver_max_iters;
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Semantic hash: everything that affects results (out_dir and workers
/// excluded, they only affect where and how fast).
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("out_dir");
  j.erase("workers");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return std::string(buf);
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

}  // namespace detail

struct RunArtifacts {
  std::vector<SimResult> results;  // one per seed
  std::filesystem::path metrics_csv;
};

/// Executes a config end to end: truth per seed, simulation, artifacts
/// (metrics.csv, run_log_<seed>.csv, lc decisions, config_echo.json).
inline RunArtifacts run_from_config(const RunConfig& cfg, bool write_files = true) {
  RadialNetwork net = load_network(cfg.network);
  std::filesystem::path out(cfg.out_dir);
  if (write_files) std::filesystem::create_directories(out);

  RunArtifacts art;
  std::string hash = config_hash(cfg);
  std::string metrics;
  metrics +=
      "config_hash,seed,sq_volt_dev,arbitrage_profit,max_profit,violation_count\n";
  for (std::uint64_t seed : cfg.seeds) {
    TruthBundle world =
        generate_truth(net, cfg.deployment, cfg.days, seed, cfg.delta_f + cfg.delta_gc);
    SimOptions opt = cfg.sim_options();
    if (write_files) opt.out_dir = out;
    SimResult res = run_simulation(net, world, cfg.gc_config(), cfg.lc_config(),
                                   cfg.tariff, controller_from_string(cfg.controller),
                                   seed, opt);
    metrics += hash + "," + std::to_string(seed) + "," +
               detail::fmt_double(res.metrics.sq_volt_dev) + "," +
               detail::fmt_double(res.metrics.arbitrage_profit) + "," +
               detail::fmt_double(res.max_profit_oracle) + "," +
               std::to_string(res.metrics.violation_count) + "\n";
    if (write_files) {
      std::ofstream log(out / ("run_log_" + std::to_string(seed) + ".csv"));
      log << "step,bus,v_pu,d_kw,solar_kw,u_kw,q_kwh,price\n";
      for (long t = 0; t < res.steps; ++t) {
        for (int b = 0; b < net.n_buses(); ++b) {
          double u = 0.0, q = 0.0;
          for (std::size_t k = 0; k < res.unit_nodes.size(); ++k)
            if (res.unit_nodes[k] == b) {
              u = res.actions_kw[static_cast<std::size_t>(t)][k];
              q = res.charges_kwh[static_cast<std::size_t>(t)][k];
            }
          log << t << "," << b << ","
              << detail::fmt_double(
                     res.voltages[static_cast<std::size_t>(t)]
                                 [static_cast<std::size_t>(b)])
              << ","
              << detail::fmt_double(
                     world.truth.demand_kw[static_cast<std::size_t>(b)]
                                          [static_cast<std::size_t>(t)])
              << ","
              << detail::fmt_double(
                     world.truth.solar_kw[static_cast<std::size_t>(b)]
                                         [static_cast<std::size_t>(t)])
              << "," << detail::fmt_double(u) << "," << detail::fmt_double(q)
              << "," << detail::fmt_double(price_at(t, cfg.delta_min_h, cfg.tariff))
              << "\n";
        }
      }
    }
    art.results.push_back(std::move(res));
  }
  if (write_files) {
    art.metrics_csv = out / "metrics.csv";
    std::ofstream m(art.metrics_csv);
    m << metrics;
    std::ofstream echo(out / "config_echo.json");
    echo << config_to_json(cfg).dump(2) << "\n";
  }
  return art;
}

struct SweepAxis {
  std::string field;
  std::vector<double> values;
};

struct SweepCell {
  std::map<std::string, double> coords;
  double sq_volt_dev_mean = 0, sq_volt_dev_std = 0;
  double profit_mean = 0, profit_std = 0;
  double max_profit_mean = 0;
  double deviation_mean = 0;
  double energy_cost_mean = 0;
  long violations = 0;
  int failures = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::string csv;
};

inline void apply_axis(RunConfig& cfg, const std::string& field, double value) {
  if (field == "gamma") cfg.gamma = value;
  else if (field == "lambda") cfg.lambda = value;
  else if (field == "sigma") cfg.sigma = value;
  else if (field == "days") cfg.days = static_cast<int>(value);
  else if (field == "solar_penetration") cfg.deployment.solar_penetration = value;
  else if (field == "storage_penetration") cfg.deployment.storage_penetration = value;
  else if (field == "der_node_fraction") cfg.deployment.der_node_fraction = value;
  else if (field == "global_scenarios") cfg.global_scenarios = static_cast<int>(value);
  else if (field == "local_scenarios") cfg.local_scenarios = static_cast<int>(value);
  else throw ConfigError("unknown sweep axis: " + field);
}

/// Grid runner: every (cell, seed) simulation is independent; cells run
/// concurrently with single-threaded interiors, results gathered by index.
inline SweepResult sweep(const RunConfig& base, const std::vector<SweepAxis>& axes,
                         int workers) {
  if (axes.empty()) throw ConfigError("sweep needs at least one axis");
  std::size_t n_cells = 1;
  for (const auto& ax : axes) {
    if (ax.values.empty()) throw ConfigError("empty sweep axis " + ax.field);
    n_cells *= ax.values.size();
  }
  const std::size_t n_seeds = base.seeds.size();
  struct CellRun {
    SimMetrics metrics;
    double max_profit = 0, deviation = 0;
    bool failed = false;
  };
  std::vector<CellRun> runs(n_cells * n_seeds);
  RadialNetwork net = load_network(base.network);

  parallel_for(n_cells * n_seeds, workers, [&](std::size_t task) {
    std::size_t cell = task / n_seeds;
    std::size_t si = task % n_seeds;
    RunConfig cfg = base;
    std::size_t rem = cell;
    for (const auto& ax : axes) {
      apply_axis(cfg, ax.field, ax.values[rem % ax.values.size()]);
      rem /= ax.values.size();
    }
    try {
      std::uint64_t seed = cfg.seeds[si];
      TruthBundle world = generate_truth(net, cfg.deployment, cfg.days, seed,
                                         cfg.delta_f + cfg.delta_gc);
      SimOptions opt = cfg.sim_options();
      opt.workers = 1;
      opt.out_dir.reset();
      SimResult res =
          run_simulation(net, world, cfg.gc_config(), cfg.lc_config(), cfg.tariff,
                         controller_from_string(cfg.controller), seed, opt);
      runs[task] = {res.metrics, res.max_profit_oracle, res.profile_deviation_kw,
                    false};
    } catch (const std::exception&) {
      runs[task].failed = true;
    }
  });

  SweepResult out;
  std::string csv;
  for (const auto& ax : axes) csv += ax.field + ",";
  csv +=
      "sq_volt_dev_mean,sq_volt_dev_std,profit_mean,profit_std,max_profit_mean,"
      "deviation_mean,energy_cost_mean,violations,failures\n";
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    SweepCell sc;
    std::size_t rem = cell;
    for (const auto& ax : axes) {
      sc.coords[ax.field] = ax.values[rem % ax.values.size()];
      rem /= ax.values.size();
    }
    std::vector<double> vdevs, profits;
    for (std::size_t si = 0; si < n_seeds; ++si) {
      const CellRun& r = runs[cell * n_seeds + si];
      if (r.failed) {
        ++sc.failures;
        continue;
      }
      vdevs.push_back(r.metrics.sq_volt_dev);
      profits.push_back(r.metrics.arbitrage_profit);
      sc.max_profit_mean += r.max_profit;
      sc.deviation_mean += r.deviation;
      sc.energy_cost_mean += r.metrics.energy_cost;
      sc.violations += r.metrics.violation_count;
    }
    auto mean_std = [](const std::vector<double>& v, double& m, double& s) {
      if (v.empty()) {
        m = s = std::numeric_limits<double>::quiet_NaN();
        return;
      }
      m = 0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      s = 0;
      for (double x : v) s += (x - m) * (x - m);
      s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
    };
    mean_std(vdevs, sc.sq_volt_dev_mean, sc.sq_volt_dev_std);
    mean_std(profits, sc.profit_mean, sc.profit_std);
    std::size_t ok = vdevs.size();
    if (ok > 0) {
      sc.max_profit_mean /= static_cast<double>(ok);
      sc.deviation_mean /= static_cast<double>(ok);
      sc.energy_cost_mean /= static_cast<double>(ok);
    }
    for (const auto& ax : axes)
      csv += detail::fmt_double(sc.coords[ax.field]) + ",";
    csv += detail::fmt_double(sc.sq_volt_dev_mean) + "," +
           detail::fmt_double(sc.sq_volt_dev_std) + "," +
           detail::fmt_double(sc.profit_mean) + "," +
           detail::fmt_double(sc.profit_std) + "," +
           detail::fmt_double(sc.max_profit_mean) + "," +
           detail::fmt_double(sc.deviation_mean) + "," +
           detail::fmt_double(sc.energy_cost_mean) + "," +
           std::to_string(sc.violations) + "," + std::to_string(sc.failures) +
           "\n";
    out.cells.push_back(std::move(sc));
  }
  out.csv = csv;
  return out;
}

}  // namespace dercoord
