#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dercoord/common.hpp"

namespace dercoord {

enum class BusKind { slack, load, der };

inline std::string to_string(BusKind k) {
  switch (k) {
    case BusKind::slack: return "slack";
    case BusKind::load: return "load";
    case BusKind::der: return "der";
  }
  return "?";
}

inline BusKind bus_kind_from_string(const std::string& s) {
  if (s == "slack") return BusKind::slack;
  if (s == "load") return BusKind::load;
  if (s == "der") return BusKind::der;
  throw ParseError("unknown bus kind: " + s);
}

struct Bus {
  int id = 0;
  BusKind kind = BusKind::load;
  double peak_load_kw = 0.0;
  double power_factor = 1.0;
  bool has_storage = false;
  bool has_solar = false;

  /// tan(acos(pf)); reactive load = real load * tan_phi.
  double tan_phi() const {
    double pf = power_factor;
    return std::sqrt(std::max(0.0, 1.0 - pf * pf)) / pf;
  }
};

struct Edge {
  int from_bus = 0;
  int to_bus = 0;
  double r_pu = 0.0;
  double x_pu = 0.0;

  std::complex<double> admittance() const {
    return 1.0 / std::complex<double>(r_pu, x_pu);
  }
};

/// Single-phase balanced equivalent of a radial feeder, per-unit. Immutable
/// after construction and safe to share across threads.
class RadialNetwork {
 public:
  RadialNetwork(std::vector<Bus> buses, std::vector<Edge> edges,
                double base_voltage_kv, double base_power_kva)
      : buses_(std::move(buses)),
        edges_(std::move(edges)),
        base_voltage_kv_(base_voltage_kv),
        base_power_kva_(base_power_kva) {
    validate();
    build_adjacency();
  }

  const std::vector<Bus>& buses() const { return buses_; }
  const std::vector<Edge>& edges() const { return edges_; }
  double base_voltage_kv() const { return base_voltage_kv_; }
  double base_power_kva() const { return base_power_kva_; }

  int n_buses() const { return static_cast<int>(buses_.size()); }

  double to_per_unit(double kw) const { return kw / base_power_kva_; }
  double to_physical(double pu) const { return pu * base_power_kva_; }

  /// Adjacent buses of i with the connecting edge admittance. Symmetric:
  /// j appears in neighbors(i) iff i appears in neighbors(j).
  const std::vector<std::pair<int, std::complex<double>>>& neighbors(int i) const {
    if (i < 0 || i >= n_buses()) throw ValueError("bus id out of range");
    return adjacency_[static_cast<std::size_t>(i)];
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["base_kv"] = base_voltage_kv_;
    j["base_kva"] = base_power_kva_;
    j["buses"] = nlohmann::json::array();
    for (const Bus& b : buses_) {
      j["buses"].push_back({{"id", b.id},
                            {"kind", to_string(b.kind)},
                            {"peak_kw", b.peak_load_kw},
                            {"pf", b.power_factor}});
    }
    j["edges"] = nlohmann::json::array();
    for (const Edge& e : edges_) {
      j["edges"].push_back({{"from", e.from_bus},
                            {"to", e.to_bus},
                            {"r_pu", e.r_pu},
                            {"x_pu", e.x_pu}});
    }
    return j;
  }

  static RadialNetwork from_json(const nlohmann::json& j) {
    require_keys(j, {"base_kv", "base_kva", "buses", "edges"}, "network");
    std::vector<Bus> buses;
    for (const auto& jb : j.at("buses")) {
      require_keys(jb, {"id", "kind", "peak_kw", "pf"}, "bus");
      Bus b;
      b.id = jb.at("id").get<int>();
      b.kind = bus_kind_from_string(jb.at("kind").get<std::string>());
      b.peak_load_kw = jb.at("peak_kw").get<double>();
      b.power_factor = jb.at("pf").get<double>();
      b.has_storage = b.has_solar = (b.kind == BusKind::der);
      buses.push_back(b);
    }
    std::vector<Edge> edges;
    for (const auto& je : j.at("edges")) {
      require_keys(je, {"from", "to", "r_pu", "x_pu"}, "edge");
      Edge e;
      e.from_bus = je.at("from").get<int>();
      e.to_bus = je.at("to").get<int>();
      e.r_pu = je.at("r_pu").get<double>();
      e.x_pu = je.at("x_pu").get<double>();
      edges.push_back(e);
    }
    return RadialNetwork(std::move(buses), std::move(edges),
                         j.at("base_kv").get<double>(),
                         j.at("base_kva").get<double>());
  }

 private:
  static void require_keys(const nlohmann::json& j,
                           std::initializer_list<const char*> keys,
                           const char* what) {
    if (!j.is_object()) throw ParseError(std::string(what) + ": expected object");
    for (const char* k : keys) {
      if (!j.contains(k))
        throw ParseError(std::string(what) + ": missing field '" + k + "'");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) {
        return it.key() == k;
      });
      if (!known)
        throw ParseError(std::string(what) + ": unknown field '" + it.key() + "'");
    }
  }

  void validate() const {
    if (!(base_voltage_kv_ > 0) || !(base_power_kva_ > 0))
      throw ValueError("base_kv and base_kva must be positive");
    const int n = n_buses();
    if (n < 1) throw TopologyError("network has no buses");
    for (int i = 0; i < n; ++i) {
      const Bus& b = buses_[static_cast<std::size_t>(i)];
      if (b.id != i) throw TopologyError("bus ids must be dense 0..N in order");
      if (!(b.power_factor > 0.0 && b.power_factor <= 1.0))
        throw ValueError("power factor must be in (0,1]");
      if (b.peak_load_kw < 0 || !std::isfinite(b.peak_load_kw))
        throw ValueError("peak_kw must be finite and nonnegative");
      if (b.kind == BusKind::slack && i != 0)
        throw TopologyError("slack bus must have id 0");
      if (i == 0 && b.kind != BusKind::slack)
        throw TopologyError("bus 0 must be the slack bus");
      if (b.kind == BusKind::der && !(b.peak_load_kw > 0))
        throw ValueError("der bus must have nonzero load");
    }
    if (edges_.size() != static_cast<std::size_t>(n - 1))
      throw TopologyError("radial network needs exactly N edges for N+1 buses");
    for (const Edge& e : edges_) {
      if (e.from_bus < 0 || e.from_bus >= n || e.to_bus < 0 || e.to_bus >= n)
        throw TopologyError("edge endpoint out of range");
      if (e.from_bus == e.to_bus) throw TopologyError("self-loop edge");
      if (e.r_pu < 0 || !std::isfinite(e.r_pu) || !std::isfinite(e.x_pu))
        throw ValueError("edge impedance must be finite with r >= 0");
      if (e.r_pu == 0.0 && e.x_pu == 0.0)
        throw ValueError("edge impedance must be nonzero");
    }
    // Connectivity: |E| = N plus BFS reaching all buses rules out cycles.
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (const Edge& e : edges_) {
      adj[static_cast<std::size_t>(e.from_bus)].push_back(e.to_bus);
      adj[static_cast<std::size_t>(e.to_bus)].push_back(e.from_bus);
    }
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::queue<int> q;
    q.push(0);
    seen[0] = true;
    int visited = 1;
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          ++visited;
          q.push(v);
        }
      }
    }
    if (visited != n)
      throw TopologyError("network is disconnected or contains a cycle");
  }

  void build_adjacency() {
    adjacency_.assign(static_cast<std::size_t>(n_buses()), {});
    for (const Edge& e : edges_) {
      std::complex<double> y = e.admittance();
      adjacency_[static_cast<std::size_t>(e.from_bus)].emplace_back(e.to_bus, y);
      adjacency_[static_cast<std::size_t>(e.to_bus)].emplace_back(e.from_bus, y);
    }
  }

  std::vector<Bus> buses_;
  std::vector<Edge> edges_;
  double base_voltage_kv_;
  double base_power_kva_;
  std::vector<std::vector<std::pair<int, std::complex<double>>>> adjacency_;
};

inline RadialNetwork load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open network file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed network file " + path.string() + ": " + e.what());
  }
  return RadialNetwork::from_json(j);
}

inline void save_network(const RadialNetwork& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write network file: " + path.string());
  out << net.to_json().dump(2) << "\n";
}

inline const std::vector<std::pair<int, std::complex<double>>>& neighbors(
    const RadialNetwork& net, int bus) {
  return net.neighbors(bus);
}

}  // namespace dercoord
