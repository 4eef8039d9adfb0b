#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "dercoord/common.hpp"

namespace dercoord {

/// Per-lead-time first and second moments of forecast residuals
/// (realized - forecast).
struct ResidualProfile {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct ForecastRequest {
  std::vector<std::vector<double>> history;  // [node][step], hourly, step 0 = midnight
  int horizon = 0;
  int n_scenarios = 1;
  std::uint64_t seed = 0;
};

struct ScenarioSet {
  std::vector<std::vector<double>> point;                  // [node][t]
  std::vector<std::vector<std::vector<double>>> scenarios; // [g][node][t]
  std::vector<ResidualProfile> residual_stats;             // [node]
};

inline constexpr int kSeasonalPeriod = 24;
inline constexpr int kSeasonalMinHistory = 2 * kSeasonalPeriod;
inline constexpr int kSeasonalWindowDays = 7;

/// Seasonal persistence: forecast value at lead t is the mean of the same
/// hour-of-day over the trailing 7 available days. Histories are assumed to
/// start at midnight so hour-of-day is index mod 24.
inline std::vector<std::vector<double>> forecast_seasonal(const ForecastRequest& req) {
  std::vector<std::vector<double>> out;
  out.reserve(req.history.size());
  for (const auto& hist : req.history) {
    if (static_cast<int>(hist.size()) < kSeasonalMinHistory)
      throw InsufficientHistory("seasonal forecaster needs >= 48 h of history");
    std::vector<double> f(static_cast<std::size_t>(req.horizon));
    const long n = static_cast<long>(hist.size());
    for (int t = 0; t < req.horizon; ++t) {
      long abs_step = n + t;
      long hod = abs_step % kSeasonalPeriod;
      double acc = 0.0;
      int cnt = 0;
      // most recent sample with this hour-of-day, then walk back by days
      long k = hod + ((n - 1 - hod) / kSeasonalPeriod) * kSeasonalPeriod;
      while (k >= 0 && cnt < kSeasonalWindowDays) {
        acc += hist[static_cast<std::size_t>(k)];
        ++cnt;
        k -= kSeasonalPeriod;
      }
      f[static_cast<std::size_t>(t)] = acc / cnt;
    }
    out.push_back(std::move(f));
  }
  return out;
}

/// Adjustable-accuracy oracle forecaster: element j of the output is
/// (1+x_j)*truth_j with x_j ~ N(0, min(lead,10)/10 * sigma^2), where
/// lead = lead_offset + j + 1 counts steps past the information cutoff.
inline std::vector<double> forecast_artificial(const std::vector<double>& truth,
                                               double sigma, std::uint64_t seed,
                                               int lead_offset = 0) {
  if (sigma < 0) throw ValueError("sigma must be nonnegative");
  std::vector<double> out(truth.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t j = 0; j < truth.size(); ++j) {
    int lead = lead_offset + static_cast<int>(j) + 1;
    double scale = sigma * std::sqrt(std::min(lead, 10) / 10.0);
    double x = scale > 0 ? scale * unit(rng) : 0.0;
    out[j] = (1.0 + x) * truth[j];
  }
  return out;
}

/// Draws n scenario trajectories around a point forecast by adding
/// independent normal residuals with the given per-lead mean/sigma profile.
/// Profiles shorter than the horizon are extended with their last entry;
/// empty profiles mean zero residuals.
inline ScenarioSet generate_scenarios(
    const std::vector<std::vector<double>>& point,
    const std::vector<ResidualProfile>& residual_stats, int n,
    std::uint64_t seed) {
  if (n < 1) throw ValueError("need at least one scenario");
  if (residual_stats.size() != point.size())
    throw ShapeMismatch("residual stats must match node count");
  ScenarioSet set;
  set.point = point;
  set.residual_stats = residual_stats;
  set.scenarios.resize(static_cast<std::size_t>(n));
  for (int g = 0; g < n; ++g) {
    auto& scen = set.scenarios[static_cast<std::size_t>(g)];
    scen.resize(point.size());
    for (std::size_t node = 0; node < point.size(); ++node) {
      const auto& prof = residual_stats[node];
      std::mt19937_64 rng(derive_seed(seed, 0x5ce7a210u, static_cast<std::uint64_t>(g),
                                      static_cast<std::uint64_t>(node)));
      std::normal_distribution<double> unit(0.0, 1.0);
      auto& series = scen[node];
      series.resize(point[node].size());
      for (std::size_t t = 0; t < series.size(); ++t) {
        double mu = 0.0, sd = 0.0;
        if (!prof.mean.empty()) {
          std::size_t k = std::min(t, prof.mean.size() - 1);
          mu = prof.mean[k];
          sd = prof.stddev[k];
        }
        double eps = sd > 0 ? mu + sd * unit(rng) : mu;
        series[t] = point[node][t] + eps;
      }
    }
  }
  return set;
}

/// Empirical per-lead mean and standard deviation of realized - forecast
/// over a history of aligned (forecast, realized) series pairs.
inline ResidualProfile residual_stats_update(
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs) {
  if (pairs.size() < 2)
    throw InsufficientHistory("need >= 2 forecast/realized pairs");
  std::size_t max_lead = 0;
  for (const auto& [f, r] : pairs) {
    if (f.size() != r.size())
      throw ShapeMismatch("forecast/realized lengths differ");
    max_lead = std::max(max_lead, f.size());
  }
  ResidualProfile prof;
  prof.mean.assign(max_lead, 0.0);
  prof.stddev.assign(max_lead, 0.0);
  for (std::size_t lead = 0; lead < max_lead; ++lead) {
    double acc = 0.0;
    int cnt = 0;
    for (const auto& [f, r] : pairs)
      if (lead < f.size()) {
        acc += r[lead] - f[lead];
        ++cnt;
      }
    double mean = acc / cnt;
    double ss = 0.0;
    for (const auto& [f, r] : pairs)
      if (lead < f.size()) {
        double d = (r[lead] - f[lead]) - mean;
        ss += d * d;
      }
    prof.mean[lead] = mean;
    prof.stddev[lead] = cnt > 1 ? std::sqrt(ss / (cnt - 1)) : 0.0;
  }
  return prof;
}

/// Incremental per-lead residual accumulator used by the controllers.
class ResidualTracker {
 public:
  void record(int lead, double residual) {
    if (lead < 0) return;
    if (static_cast<std::size_t>(lead) >= residuals_.size())
      residuals_.resize(static_cast<std::size_t>(lead) + 1);
    residuals_[static_cast<std::size_t>(lead)].push_back(residual);
  }

  bool has_stats() const {
    for (const auto& v : residuals_)
      if (v.size() >= 2) return true;
    return false;
  }

  /// Per-lead profile up to max_lead; leads with fewer than two samples
  /// inherit the nearest informed lead (or zero if none exists).
  ResidualProfile profile(int max_lead) const {
    ResidualProfile prof;
    prof.mean.assign(static_cast<std::size_t>(max_lead), 0.0);
    prof.stddev.assign(static_cast<std::size_t>(max_lead), 0.0);
    double last_mu = 0.0, last_sd = 0.0;
    bool seen = false;
    for (int lead = 0; lead < max_lead; ++lead) {
      const std::vector<double>* v =
          static_cast<std::size_t>(lead) < residuals_.size()
              ? &residuals_[static_cast<std::size_t>(lead)]
              : nullptr;
      if (v && v->size() >= 2) {
        double mean = 0.0;
        for (double r : *v) mean += r;
        mean /= static_cast<double>(v->size());
        double ss = 0.0;
        for (double r : *v) ss += (r - mean) * (r - mean);
        last_mu = mean;
        last_sd = std::sqrt(ss / (static_cast<double>(v->size()) - 1.0));
        seen = true;
      }
      prof.mean[static_cast<std::size_t>(lead)] = seen ? last_mu : 0.0;
      prof.stddev[static_cast<std::size_t>(lead)] = seen ? last_sd : 0.0;
    }
    return prof;
  }

 private:
  std::vector<std::vector<double>> residuals_;
};

}  // namespace dercoord
