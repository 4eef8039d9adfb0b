#include <catch2/catch_amalgamated.hpp>

#include <complex>
#include <queue>

#include "dercoord/network.hpp"
#include "support/test_util.hpp"

using namespace dercoord;

TEST_CASE("two-bus file loads with one edge", "[network]") {
  RadialNetwork net = load_network(testsupport::fixture("feeder2.json"));
  REQUIRE(net.n_buses() == 2);
  REQUIRE(net.edges().size() == 1);
  REQUIRE(net.buses()[0].kind == BusKind::slack);
  REQUIRE(net.buses()[1].peak_load_kw == 100.0);
  auto y = net.edges()[0].admittance();
  REQUIRE(y.real() == Catch::Approx(50.0));
  REQUIRE(y.imag() == Catch::Approx(-50.0));
}

TEST_CASE("cycle is rejected", "[network]") {
  std::vector<Bus> buses{{0, BusKind::slack, 0, 1.0, false, false},
                         {1, BusKind::load, 10, 0.95, false, false},
                         {2, BusKind::load, 10, 0.95, false, false}};
  std::vector<Edge> edges{{0, 1, 0.01, 0.01},
                          {1, 2, 0.01, 0.01},
                          {2, 0, 0.01, 0.01}};
  REQUIRE_THROWS_AS(
      RadialNetwork(std::move(buses), std::move(edges), 12.47, 1000.0),
      TopologyError);
}

TEST_CASE("disconnected bus is rejected", "[network]") {
  std::vector<Bus> buses{{0, BusKind::slack, 0, 1.0, false, false},
                         {1, BusKind::load, 10, 0.95, false, false},
                         {2, BusKind::load, 10, 0.95, false, false}};
  // 2 edges for 3 buses but bus 2 unreachable (parallel edge 0-1)
  std::vector<Edge> edges{{0, 1, 0.01, 0.01}, {1, 0, 0.02, 0.01}};
  REQUIRE_THROWS_AS(
      RadialNetwork(std::move(buses), std::move(edges), 12.47, 1000.0),
      TopologyError);
}

TEST_CASE("bad values are rejected", "[network]") {
  REQUIRE_THROWS_AS(
      RadialNetwork({{0, BusKind::slack, 0, 1.0, false, false},
                     {1, BusKind::load, 10, 1.5, false, false}},
                    {{0, 1, 0.01, 0.01}}, 12.47, 1000.0),
      ValueError);
  REQUIRE_THROWS_AS(
      RadialNetwork({{0, BusKind::slack, 0, 1.0, false, false},
                     {1, BusKind::load, 10, 0.95, false, false}},
                    {{0, 1, 0.01, 0.01}}, 12.47, -5.0),
      ValueError);
  REQUIRE_THROWS_AS(
      RadialNetwork({{0, BusKind::slack, 0, 1.0, false, false},
                     {1, BusKind::der, 0.0, 0.95, false, false}},
                    {{0, 1, 0.01, 0.01}}, 12.47, 1000.0),
      ValueError);
}

TEST_CASE("unknown fields are rejected", "[network]") {
  nlohmann::json j = {
      {"base_kv", 12.47},
      {"base_kva", 1000.0},
      {"buses", {{{"id", 0}, {"kind", "slack"}, {"peak_kw", 0.0}, {"pf", 1.0}}}},
      {"edges", nlohmann::json::array()},
      {"comment", "not allowed"}};
  REQUIRE_THROWS_AS(RadialNetwork::from_json(j), ParseError);
}

TEST_CASE("neighbors are symmetric with edge admittance", "[network]") {
  RadialNetwork net = testsupport::two_bus();
  auto n0 = net.neighbors(0);
  auto n1 = net.neighbors(1);
  REQUIRE(n0.size() == 1);
  REQUIRE(n1.size() == 1);
  REQUIRE(n0[0].first == 1);
  REQUIRE(n1[0].first == 0);
  REQUIRE(n0[0].second == n1[0].second);
}

TEST_CASE("star center sees all leaves", "[network]") {
  std::vector<Bus> buses{{0, BusKind::slack, 0, 1.0, false, false}};
  std::vector<Edge> edges;
  for (int i = 1; i <= 4; ++i) {
    buses.push_back({i, BusKind::load, 10, 0.95, false, false});
    edges.push_back({0, i, 0.01, 0.01});
  }
  RadialNetwork net(std::move(buses), std::move(edges), 12.47, 1000.0);
  REQUIRE(net.neighbors(0).size() == 4);
}

TEST_CASE("every fixture is a tree reachable from the slack", "[network]") {
  for (const char* name :
       {"feeder2.json", "feeder3.json", "feeder6.json", "feeder12.json"}) {
    RadialNetwork net = load_network(testsupport::fixture(name));
    REQUIRE(net.edges().size() == static_cast<std::size_t>(net.n_buses() - 1));
    std::vector<bool> seen(static_cast<std::size_t>(net.n_buses()), false);
    std::queue<int> q;
    q.push(0);
    seen[0] = true;
    int visited = 1;
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (auto& [v, y] : net.neighbors(u))
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          ++visited;
          q.push(v);
        }
    }
    REQUIRE(visited == net.n_buses());
  }
}

TEST_CASE("twelve-bus fixture shape", "[network]") {
  RadialNetwork net = load_network(testsupport::fixture("feeder12.json"));
  REQUIRE(net.n_buses() == 12);
  REQUIRE(net.edges().size() == 11);
}

TEST_CASE("serialize/parse round-trip is identical", "[network]") {
  RadialNetwork net = load_network(testsupport::fixture("feeder6.json"));
  RadialNetwork back = RadialNetwork::from_json(net.to_json());
  REQUIRE(net.to_json() == back.to_json());
  REQUIRE(back.n_buses() == net.n_buses());
}

TEST_CASE("per-unit conversion round-trips", "[network]") {
  RadialNetwork net = testsupport::two_bus();
  for (double kw : {0.0, 1.0, 123.456, 9999.0}) {
    REQUIRE(net.to_physical(net.to_per_unit(kw)) ==
            Catch::Approx(kw).margin(1e-12 * std::max(kw, 1.0)));
  }
}
