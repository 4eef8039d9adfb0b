#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dercoord/forecast.hpp"

using namespace dercoord;

namespace {
std::vector<double> periodic(int hours, double amp = 10.0) {
  std::vector<double> h(static_cast<std::size_t>(hours));
  for (int t = 0; t < hours; ++t)
    h[static_cast<std::size_t>(t)] =
        20.0 + amp * std::sin(2 * M_PI * (t % 24) / 24.0);
  return h;
}
}  // namespace

TEST_CASE("seasonal: periodic history repeats exactly", "[forecast]") {
  ForecastRequest req;
  req.history = {periodic(5 * 24)};
  req.horizon = 48;
  auto f = forecast_seasonal(req);
  for (int t = 0; t < 48; ++t) {
    int hod = (5 * 24 + t) % 24;
    REQUIRE(f[0][static_cast<std::size_t>(t)] ==
            Catch::Approx(20.0 + 10.0 * std::sin(2 * M_PI * hod / 24.0))
                .margin(1e-9));
  }
}

TEST_CASE("seasonal: constant history forecasts the constant", "[forecast]") {
  ForecastRequest req;
  req.history = {std::vector<double>(72, 5.5)};
  req.horizon = 24;
  auto f = forecast_seasonal(req);
  for (double v : f[0]) REQUIRE(v == Catch::Approx(5.5));
}

TEST_CASE("seasonal: too little history raises", "[forecast]") {
  ForecastRequest req;
  req.history = {std::vector<double>(40, 1.0)};
  req.horizon = 24;
  REQUIRE_THROWS_AS(forecast_seasonal(req), InsufficientHistory);
}

TEST_CASE("seasonal: noise is averaged down", "[forecast]") {
  // periodic + white noise; RMSE of the forecast <= 1.2 * sigma
  double sigma = 3.0;
  double se = 0.0;
  int count = 0;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sigma);
    auto hist = periodic(7 * 24);
    for (double& v : hist) v += g(rng);
    ForecastRequest req;
    req.history = {hist};
    req.horizon = 48;
    auto f = forecast_seasonal(req);
    for (int t = 0; t < 48; ++t) {
      int hod = (7 * 24 + t) % 24;
      double truth = 20.0 + 10.0 * std::sin(2 * M_PI * hod / 24.0);
      se += std::pow(f[0][static_cast<std::size_t>(t)] - truth, 2);
      ++count;
    }
  }
  REQUIRE(std::sqrt(se / count) <= 1.2 * sigma);
}

TEST_CASE("artificial: sigma=0 reproduces the truth", "[forecast]") {
  std::vector<double> truth{1, 2, 3, 4, 5};
  auto f = forecast_artificial(truth, 0.0, 123);
  REQUIRE(f == truth);
}

TEST_CASE("artificial: variance ramp reaches sigma^2 at lead 10", "[forecast]") {
  std::vector<double> truth(12, 100.0);
  double sigma = 0.3;
  int n = 4000;
  double acc10 = 0.0, acc5 = 0.0;
  for (int s = 0; s < n; ++s) {
    auto f = forecast_artificial(truth, sigma, static_cast<std::uint64_t>(s));
    double x10 = f[9] / 100.0 - 1.0;   // lead 10
    double x5 = f[4] / 100.0 - 1.0;    // lead 5
    acc10 += x10 * x10;
    acc5 += x5 * x5;
  }
  REQUIRE(std::sqrt(acc10 / n) == Catch::Approx(0.3).epsilon(0.05));
  REQUIRE(acc5 / n == Catch::Approx(0.5 * 0.09).epsilon(0.10));
}

TEST_CASE("artificial: lead offset saturates the ramp", "[forecast]") {
  std::vector<double> truth(4, 50.0);
  int n = 4000;
  double acc = 0.0;
  for (int s = 0; s < n; ++s) {
    auto f = forecast_artificial(truth, 0.2, static_cast<std::uint64_t>(s), 24);
    double x = f[0] / 50.0 - 1.0;
    acc += x * x;
  }
  REQUIRE(std::sqrt(acc / n) == Catch::Approx(0.2).epsilon(0.05));
}

TEST_CASE("scenarios: zero stats collapse onto the point", "[forecast]") {
  std::vector<std::vector<double>> point{{1, 2, 3}};
  auto set = generate_scenarios(point, {ResidualProfile{}}, 1, 9);
  REQUIRE(set.scenarios.size() == 1);
  REQUIRE(set.scenarios[0][0] == point[0]);
}

TEST_CASE("scenarios: empirical sigma matches the profile", "[forecast]") {
  std::vector<std::vector<double>> point{std::vector<double>(6, 10.0)};
  ResidualProfile prof;
  prof.mean.assign(6, 0.0);
  prof.stddev.assign(6, 2.0);
  auto set = generate_scenarios(point, {prof}, 1500, 4);
  for (int t = 0; t < 6; ++t) {
    double m = 0, ss = 0;
    for (const auto& s : set.scenarios) m += s[0][static_cast<std::size_t>(t)];
    m /= 1500;
    for (const auto& s : set.scenarios)
      ss += std::pow(s[0][static_cast<std::size_t>(t)] - m, 2);
    double sd = std::sqrt(ss / 1499);
    REQUIRE(sd == Catch::Approx(2.0).epsilon(0.05));
    REQUIRE(m == Catch::Approx(10.0).margin(0.2));
  }
}

TEST_CASE("scenarios: distinct seeds differ, same seed repeats", "[forecast]") {
  std::vector<std::vector<double>> point{std::vector<double>(4, 1.0)};
  ResidualProfile prof;
  prof.mean.assign(4, 0.0);
  prof.stddev.assign(4, 1.0);
  auto a = generate_scenarios(point, {prof}, 3, 10);
  auto b = generate_scenarios(point, {prof}, 3, 11);
  auto c = generate_scenarios(point, {prof}, 3, 10);
  REQUIRE(a.scenarios != b.scenarios);
  REQUIRE(a.scenarios == c.scenarios);
}

TEST_CASE("residual stats: identical pairs give zero moments", "[forecast]") {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{
      {{1, 2, 3}, {1, 2, 3}}, {{4, 5, 6}, {4, 5, 6}}};
  auto prof = residual_stats_update(pairs);
  for (double m : prof.mean) REQUIRE(m == 0.0);
  for (double s : prof.stddev) REQUIRE(s == 0.0);
}

TEST_CASE("residual stats: unit-variance noise is recovered", "[forecast]") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> f(5, 0.0), r(5);
    for (int t = 0; t < 5; ++t) r[static_cast<std::size_t>(t)] = g(rng);
    pairs.emplace_back(f, r);
  }
  auto prof = residual_stats_update(pairs);
  for (double s : prof.stddev) REQUIRE(s == Catch::Approx(1.0).epsilon(0.10));
}

TEST_CASE("residual stats: constant bias lands in the mean", "[forecast]") {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{
      {{1, 1}, {3, 3}}, {{2, 2}, {4, 4}}};
  auto prof = residual_stats_update(pairs);
  REQUIRE(prof.mean[0] == Catch::Approx(2.0));
  REQUIRE(prof.mean[1] == Catch::Approx(2.0));
}

TEST_CASE("residual stats: one pair is not enough", "[forecast]") {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{
      {{1}, {2}}};
  REQUIRE_THROWS_AS(residual_stats_update(pairs), InsufficientHistory);
}

TEST_CASE("scenario mean converges to the point forecast", "[forecast]") {
  std::vector<std::vector<double>> point{std::vector<double>(3, 7.0)};
  ResidualProfile prof;
  prof.mean.assign(3, 0.0);
  prof.stddev.assign(3, 3.0);
  auto set = generate_scenarios(point, {prof}, 4000, 21);
  for (int t = 0; t < 3; ++t) {
    double m = 0;
    for (const auto& s : set.scenarios) m += s[0][static_cast<std::size_t>(t)];
    m /= 4000;
    REQUIRE(m == Catch::Approx(7.0).margin(3.0 * 3.0 / std::sqrt(4000.0)));
  }
}
