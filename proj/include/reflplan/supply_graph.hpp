#pragma once
//
// Supply-network topology, node roles and per-node state.
//
// A network is loaded from a JSON document of the form
//
//   { "name": "semisim-v1", "version": 1,
//     "nodes": [ {"id": "...", "role": "upstream|midstream|downstream",
//                 "label": "...", "p_sale": 20, "p_cost": 10, "capacity": 40}, ... ],
//     "edges": [ {"from": "...", "to": "...", "weight": 0.3}, ... ] }
//
// and validated into an immutable SupplyNetwork.
//

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace reflplan {

using NodeIndex = std::size_t;
using EdgeIndex = std::size_t;

enum class Role { Upstream, Midstream, Downstream };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::Upstream: return "upstream";
    case Role::Midstream: return "midstream";
    case Role::Downstream: return "downstream";
  }
  return "upstream";
}

inline Role role_from_string(const std::string& s) {
  if (s == "upstream") return Role::Upstream;
  if (s == "midstream") return Role::Midstream;
  if (s == "downstream") return Role::Downstream;
  throw Error(ErrorCode::InvalidNode, "unknown role '" + s + "'");
}

struct NodeSpec {
  std::string id;
  Role role = Role::Upstream;
  std::string label;
  double p_sale = 0.0;    // currency per unit shipped
  double p_cost = 0.0;    // currency per unit bought
  double capacity = 1.0;  // units per step

  bool operator==(const NodeSpec&) const = default;
};

struct EdgeSpec {
  std::string from;
  std::string to;
  double weight = 0.0;  // dependency weight w_ji of `to` on `from`

  bool operator==(const EdgeSpec&) const = default;
};

struct NetworkSpec {
  std::string name;
  int version = 1;
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> edges;

  bool operator==(const NetworkSpec&) const = default;
};

struct Neighbor {
  std::string id;
  NodeIndex node = 0;
  EdgeIndex edge = 0;
  double weight = 0.0;

  bool operator==(const Neighbor&) const = default;
};

// Validated, immutable topology. Safe to share across episode runners.
class SupplyNetwork {
 public:
  const std::string& name() const { return spec_.name; }
  const NetworkSpec& spec() const { return spec_; }
  const std::vector<NodeSpec>& nodes() const { return spec_.nodes; }
  const std::vector<EdgeSpec>& edges() const { return spec_.edges; }
  std::size_t node_count() const { return spec_.nodes.size(); }
  std::size_t edge_count() const { return spec_.edges.size(); }

  const NodeSpec& node(NodeIndex i) const { return spec_.nodes.at(i); }
  const EdgeSpec& edge(EdgeIndex e) const { return spec_.edges.at(e); }
  NodeIndex edge_source(EdgeIndex e) const { return edge_from_.at(e); }
  NodeIndex edge_target(EdgeIndex e) const { return edge_to_.at(e); }

  std::optional<NodeIndex> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  NodeIndex index_of(const std::string& id) const {
    auto idx = find(id);
    if (!idx) throw Error(ErrorCode::UnknownNode, "node '" + id + "'");
    return *idx;
  }

  std::optional<EdgeIndex> find_edge(const std::string& from, const std::string& to) const {
    for (EdgeIndex e = 0; e < spec_.edges.size(); ++e)
      if (spec_.edges[e].from == from && spec_.edges[e].to == to) return e;
    return std::nullopt;
  }

  // Inbound neighbours, sorted by id.
  const std::vector<Neighbor>& predecessors(NodeIndex i) const { return preds_.at(i); }
  // Outbound neighbours, sorted by id.
  const std::vector<Neighbor>& successors(NodeIndex i) const { return succs_.at(i); }

  bool is_source(NodeIndex i) const { return preds_.at(i).empty(); }
  bool is_sink(NodeIndex i) const { return succs_.at(i).empty(); }

  // Planning order: downstream tier first, then midstream, then upstream; by id within a tier.
  const std::vector<NodeIndex>& demand_order() const { return demand_order_; }

  friend SupplyNetwork build_network(const NetworkSpec& spec);

 private:
  NetworkSpec spec_;
  std::map<std::string, NodeIndex> index_;
  std::vector<NodeIndex> edge_from_, edge_to_;
  std::vector<std::vector<Neighbor>> preds_, succs_;
  std::vector<NodeIndex> demand_order_;
};

inline SupplyNetwork build_network(const NetworkSpec& spec) {
  if (spec.nodes.empty()) throw Error(ErrorCode::EmptyGraph, "network '" + spec.name + "' has no nodes");

  SupplyNetwork net;
  net.spec_ = spec;
  for (NodeIndex i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    if (n.id.empty()) throw Error(ErrorCode::InvalidNode, "node #" + std::to_string(i) + " has an empty id");
    if (!net.index_.emplace(n.id, i).second) throw Error(ErrorCode::DuplicateNode, "node '" + n.id + "'");
    if (!(n.p_sale >= 0.0) || !(n.p_cost >= 0.0))
      throw Error(ErrorCode::InvalidNode, "node '" + n.id + "' has a negative price");
    if (!(n.capacity > 0.0)) throw Error(ErrorCode::InvalidNode, "node '" + n.id + "' needs capacity > 0");
  }

  net.preds_.assign(spec.nodes.size(), {});
  net.succs_.assign(spec.nodes.size(), {});
  std::set<std::pair<std::string, std::string>> seen;
  for (EdgeIndex e = 0; e < spec.edges.size(); ++e) {
    const auto& edge = spec.edges[e];
    const std::string label = "edge " + edge.from + "->" + edge.to;
    auto from = net.find(edge.from);
    auto to = net.find(edge.to);
    if (!from) throw Error(ErrorCode::DanglingEdge, label + " references unknown node '" + edge.from + "'");
    if (!to) throw Error(ErrorCode::DanglingEdge, label + " references unknown node '" + edge.to + "'");
    if (*from == *to) throw Error(ErrorCode::InvalidTopology, label + " is a self-loop");
    if (!seen.emplace(edge.from, edge.to).second) throw Error(ErrorCode::DuplicateEdge, label);
    if (!(edge.weight >= 0.0 && edge.weight <= 1.0))
      throw Error(ErrorCode::WeightOutOfRange, label + " weight " + std::to_string(edge.weight));
    net.edge_from_.push_back(*from);
    net.edge_to_.push_back(*to);
    net.preds_[*to].push_back({edge.from, *from, e, edge.weight});
    net.succs_[*from].push_back({edge.to, *to, e, edge.weight});
  }
  auto by_id = [](const Neighbor& a, const Neighbor& b) { return a.id < b.id; };
  for (auto& p : net.preds_) std::sort(p.begin(), p.end(), by_id);
  for (auto& s : net.succs_) std::sort(s.begin(), s.end(), by_id);

  bool has_source = false, has_sink = false;
  for (NodeIndex i = 0; i < spec.nodes.size(); ++i) {
    has_source |= net.preds_[i].empty();
    has_sink |= net.succs_[i].empty();
  }
  if (!has_source || !has_sink)
    throw Error(ErrorCode::InvalidTopology, "network '" + spec.name + "' needs at least one source and one sink");

  for (Role r : {Role::Downstream, Role::Midstream, Role::Upstream}) {
    std::vector<NodeIndex> tier;
    for (NodeIndex i = 0; i < spec.nodes.size(); ++i)
      if (spec.nodes[i].role == r) tier.push_back(i);
    std::sort(tier.begin(), tier.end(),
              [&](NodeIndex a, NodeIndex b) { return spec.nodes[a].id < spec.nodes[b].id; });
    net.demand_order_.insert(net.demand_order_.end(), tier.begin(), tier.end());
  }
  return net;
}

inline std::vector<Neighbor> predecessors(const SupplyNetwork& net, const std::string& node) {
  return net.predecessors(net.index_of(node));
}

// --- JSON ------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const NodeSpec& n) {
  j = {{"id", n.id},           {"role", to_string(n.role)}, {"label", n.label},
       {"p_sale", n.p_sale},   {"p_cost", n.p_cost},        {"capacity", n.capacity}};
}

inline void from_json(const nlohmann::json& j, NodeSpec& n) {
  n.id = j.at("id").get<std::string>();
  n.role = role_from_string(j.at("role").get<std::string>());
  n.label = j.value("label", n.id);
  n.p_sale = j.at("p_sale").get<double>();
  n.p_cost = j.at("p_cost").get<double>();
  n.capacity = j.at("capacity").get<double>();
}

inline void to_json(nlohmann::json& j, const EdgeSpec& e) {
  j = {{"from", e.from}, {"to", e.to}, {"weight", e.weight}};
}

inline void from_json(const nlohmann::json& j, EdgeSpec& e) {
  e.from = j.at("from").get<std::string>();
  e.to = j.at("to").get<std::string>();
  e.weight = j.at("weight").get<double>();
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = {{"name", s.name}, {"version", s.version}, {"nodes", s.nodes}, {"edges", s.edges}};
}

inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.name = j.value("name", std::string("unnamed"));
  s.version = j.value("version", 1);
  s.nodes = j.at("nodes").get<std::vector<NodeSpec>>();
  s.edges = j.value("edges", std::vector<EdgeSpec>{});
}

inline NetworkSpec parse_network_spec(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<NetworkSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("network spec: ") + e.what());
  }
}

inline std::string serialize_network_spec(const NetworkSpec& spec) {
  return nlohmann::json(spec).dump(2) + "\n";
}

// Canonical six-node, seven-edge benchmark topology: two upstream suppliers
// (equipment, materials), two foundries, two integrators, with one foundry
// cross-link. The entities are representative roles, not named companies.
inline NetworkSpec semisim_v1_spec() {
  NetworkSpec s;
  s.name = "semisim-v1";
  s.version = 1;
  s.nodes = {
      {"equipment", Role::Upstream, "lithography equipment maker", 20.0, 10.0, 40.0},
      {"materials", Role::Upstream, "wafer and specialty materials", 20.0, 10.0, 40.0},
      {"foundry-a", Role::Midstream, "leading-edge foundry", 45.0, 20.0, 25.0},
      {"foundry-b", Role::Midstream, "offshore foundry", 45.0, 20.0, 25.0},
      {"integrator-a", Role::Downstream, "device integrator A", 80.0, 45.0, 25.0},
      {"integrator-b", Role::Downstream, "device integrator B", 80.0, 45.0, 25.0},
  };
  s.edges = {
      {"equipment", "foundry-a", 0.30},    {"equipment", "foundry-b", 0.20},
      {"materials", "foundry-a", 0.20},    {"materials", "foundry-b", 0.30},
      {"foundry-a", "integrator-a", 0.35}, {"foundry-b", "integrator-b", 0.35},
      {"foundry-a", "integrator-b", 0.15},
  };
  return s;
}

// --- Node state --------------------------------------------------------------

struct NodeState {
  double inventory = 0.0;    // I, units, >= 0
  double cash = 0.0;         // C, currency
  double compliance = 100.0; // Omega, [0, 100]
  double risk = 0.0;         // R, [0, 100]
  bool operable = true;

  bool operator==(const NodeState&) const = default;
};

inline void to_json(nlohmann::json& j, const NodeState& s) {
  j = {{"I", s.inventory}, {"C", s.cash}, {"Omega", s.compliance}, {"R", s.risk}, {"operable", s.operable}};
}

inline void from_json(const nlohmann::json& j, NodeState& s) {
  s.inventory = j.at("I").get<double>();
  s.cash = j.at("C").get<double>();
  s.compliance = j.at("Omega").get<double>();
  s.risk = j.at("R").get<double>();
  s.operable = j.value("operable", true);
}

// Affine map from a node's latent feature vector to its initial state.
struct StateMapping {
  int feature_dim = 8;
  double feature_sd = 0.1;
  double inventory_base = 1.5;   // multiples of capacity
  double inventory_slope = 2.0;
  double cash_base = 5000.0;
  double cash_slope = 5000.0;
  double compliance_base = 85.0;
  double compliance_slope = 30.0;
  double risk_base = 10.0;
  double risk_slope = -40.0;
};

inline constexpr double kDefaultFeatureMean = -0.21;

// Per-node latent features: features[i][k] ~ Normal(feature_mean, sd).
inline std::vector<std::vector<double>> draw_node_features(const SupplyNetwork& net, std::uint64_t seed,
                                                           double feature_mean, const StateMapping& map = {}) {
  Rng rng = make_rng(seed, {stream::kInit});
  std::normal_distribution<double> normal(feature_mean, map.feature_sd);
  std::vector<std::vector<double>> features(net.node_count(), std::vector<double>(map.feature_dim));
  for (auto& f : features)
    for (auto& x : f) x = normal(rng);
  return features;
}

inline std::vector<NodeState> init_states(const SupplyNetwork& net, std::uint64_t seed, double feature_mean,
                                          const StateMapping& map = {}) {
  if (!std::isfinite(feature_mean)) throw Error(ErrorCode::ParamOutOfRange, "feature_mean must be finite");
  if (map.feature_dim < 4) throw Error(ErrorCode::ParamOutOfRange, "feature_dim must be >= 4");
  const auto features = draw_node_features(net, seed, feature_mean, map);
  std::vector<NodeState> states(net.node_count());
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const auto& f = features[i];
    auto& s = states[i];
    s.inventory = std::max(0.0, net.node(i).capacity * (map.inventory_base + map.inventory_slope * f[0]));
    s.cash = map.cash_base + map.cash_slope * f[1];
    s.compliance = std::clamp(map.compliance_base + map.compliance_slope * f[2], 0.0, 100.0);
    s.risk = std::clamp(map.risk_base + map.risk_slope * f[3], 0.0, 100.0);
    s.operable = true;
  }
  return states;
}

}  // namespace reflplan
