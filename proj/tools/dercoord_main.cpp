// Batch entry point: run one simulation, sweep a config grid, or validate a
// network file. All outputs are flat CSV/JSON files; plotting is external.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dercoord/config.hpp"
#include "dercoord/network.hpp"
#include "dercoord/opf.hpp"
#include "dercoord/sim.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfigError = 2;

std::vector<dercoord::SweepAxis> parse_axes(const std::string& spec) {
  nlohmann::json j;
  std::filesystem::path p(spec);
  if (std::filesystem::exists(p)) {
    std::ifstream in(p);
    in >> j;
  } else {
    j = nlohmann::json::parse(spec);
  }
  if (!j.is_object()) throw dercoord::ConfigError("axes spec must be an object");
  std::vector<dercoord::SweepAxis> axes;
  for (auto it = j.begin(); it != j.end(); ++it) {
    dercoord::SweepAxis ax;
    ax.field = it.key();
    for (const auto& v : it.value()) ax.values.push_back(v.get<double>());
    axes.push_back(std::move(ax));
  }
  return axes;
}

void apply_overrides(dercoord::RunConfig& cfg,
                     const std::optional<std::uint64_t>& seed,
                     const std::optional<int>& workers,
                     const std::optional<std::string>& out) {
  if (seed) cfg.seeds = {*seed};
  if (workers) cfg.workers = *workers;
  if (out) cfg.out_dir = *out;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            std::optional<int> workers, std::optional<std::string> out) {
  dercoord::RunConfig cfg = dercoord::load_config(config_path);
  apply_overrides(cfg, seed, workers, out);
  if (!std::filesystem::exists(cfg.network))
    throw dercoord::ConfigError("network file not found: " + cfg.network);
  dercoord::RunArtifacts art = dercoord::run_from_config(cfg);
  for (std::size_t i = 0; i < art.results.size(); ++i) {
    const auto& m = art.results[i].metrics;
    std::printf("seed=%llu sq_volt_dev=%.6g profit=%.2f max_profit=%.2f "
                "violations=%ld\n",
                static_cast<unsigned long long>(cfg.seeds[i]), m.sq_volt_dev,
                m.arbitrage_profit, art.results[i].max_profit_oracle,
                m.violation_count);
  }
  std::printf("artifacts written to %s\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& axes_spec,
              std::optional<std::uint64_t> seed, std::optional<int> workers,
              std::optional<std::string> out) {
  dercoord::RunConfig cfg = dercoord::load_config(config_path);
  apply_overrides(cfg, seed, workers, out);
  auto axes = parse_axes(axes_spec);
  int w = cfg.workers > 0 ? cfg.workers : dercoord::default_workers();
  dercoord::SweepResult res = dercoord::sweep(cfg, axes, w);
  std::filesystem::create_directories(cfg.out_dir);
  std::filesystem::path table = std::filesystem::path(cfg.out_dir) / "sweep.csv";
  std::ofstream f(table);
  f << res.csv;
  std::ofstream echo(std::filesystem::path(cfg.out_dir) / "config_echo.json");
  echo << dercoord::config_to_json(cfg).dump(2) << "\n";
  int failures = 0;
  for (const auto& c : res.cells) failures += c.failures;
  std::printf("%zu cells x %zu seeds -> %s (%d failures)\n", res.cells.size(),
              cfg.seeds.size(), table.c_str(), failures);
  return failures == 0 ? 0 : kExitFailure;
}

int cmd_validate(const std::string& network_path) {
  dercoord::RadialNetwork net = dercoord::load_network(network_path);
  std::printf("OK: %d buses, %zu edges, base %.3g kV / %.6g kVA\n",
              net.n_buses(), net.edges().size(), net.base_voltage_kv(),
              net.base_power_kva());
  // One oracle solve at peak load.
  std::vector<std::complex<double>> inj(static_cast<std::size_t>(net.n_buses()));
  for (int b = 1; b < net.n_buses(); ++b) {
    const auto& bus = net.buses()[static_cast<std::size_t>(b)];
    double p = bus.peak_load_kw / net.base_power_kva();
    inj[static_cast<std::size_t>(b)] = {-p, -p * bus.tan_phi()};
  }
  dercoord::PowerFlowSolution pf = dercoord::solve_ac_oracle(net, inj);
  double vmin = 2.0, vmax = 0.0;
  for (const auto& v : pf.voltages) {
    vmin = std::min(vmin, std::abs(v));
    vmax = std::max(vmax, std::abs(v));
  }
  std::printf("peak-load voltages: min %.4f pu, max %.4f pu, slack %.4g kW\n",
              vmin, vmax, pf.slack_power.real() * net.base_power_kva());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-layer DER coordination batch simulator"};
  app.require_subcommand(1);

  std::string config_path, network_path, axes_spec;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;

  CLI::App* run = app.add_subcommand("run", "Run one simulation from a config");
  run->add_option("config", config_path, "Config JSON path")->required();
  run->add_option("--seed", seed, "Override the config seed list");
  run->add_option("--workers", workers, "Worker threads (0 = all cores)");
  run->add_option("--out", out, "Output directory");

  CLI::App* sw = app.add_subcommand("sweep", "Sweep a config over axes");
  sw->add_option("config", config_path, "Config JSON path")->required();
  sw->add_option("--axes", axes_spec, "Axes JSON (inline or file path)")
      ->required();
  sw->add_option("--seed", seed, "Override the config seed list");
  sw->add_option("--workers", workers, "Worker threads (0 = all cores)");
  sw->add_option("--out", out, "Output directory");

  CLI::App* val = app.add_subcommand("validate", "Validate a network file");
  val->add_option("network", network_path, "Network JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, seed, workers, out);
    if (sw->parsed()) return cmd_sweep(config_path, axes_spec, seed, workers, out);
    if (val->parsed()) return cmd_validate(network_path);
  } catch (const dercoord::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return 0;
}
