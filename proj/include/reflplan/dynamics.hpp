#pragma once
//
// Supply-network environment: inventory/cash transitions, threshold risk contagion,
// policy-shock injection and the partially observed step function.
//
// Step order inside env_step (step index t, 1-based):
//   1. expire shocks whose window ended, activate shocks with onset == t
//   2. clip the intervention against halts, bans, inventory and capacity
//   3. inventory/cash update per node
//   4. endogenous risk exposure (idleness, stockouts, backpressure, violations)
//   5. network-wide risk propagation
//   6. reward, collapse check, observation
//

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "rng.hpp"
#include "supply_graph.hpp"

namespace reflplan {

inline constexpr double kRiskMax = 100.0;
inline constexpr double kComplianceMax = 100.0;

// --- Shocks -------------------------------------------------------------------

enum class ShockKind { ExportBan, MaterialShortage, Sanction, Tariff };
inline constexpr int kShockKinds = 4;

inline std::string to_string(ShockKind k) {
  switch (k) {
    case ShockKind::ExportBan: return "export_ban";
    case ShockKind::MaterialShortage: return "material_shortage";
    case ShockKind::Sanction: return "sanction";
    case ShockKind::Tariff: return "tariff";
  }
  return "export_ban";
}

inline ShockKind shock_kind_from_string(const std::string& s) {
  if (s == "export_ban") return ShockKind::ExportBan;
  if (s == "material_shortage") return ShockKind::MaterialShortage;
  if (s == "sanction") return ShockKind::Sanction;
  if (s == "tariff") return ShockKind::Tariff;
  throw Error(ErrorCode::InvalidConfig, "unknown shock kind '" + s + "'");
}

// Targets are node ids, or edge ids written "from->to". For ExportBan and
// Tariff a node target stands for all of that node's outbound / inbound edges.
struct Shock {
  ShockKind kind = ShockKind::ExportBan;
  std::vector<std::string> targets;
  double magnitude = 0.0;
  int onset = 1;
  int duration = 1;
  std::string narrative;

  int end() const { return onset + duration; }  // first step the shock is no longer active
  bool active_at(int step) const { return step >= onset && step < end(); }
  bool operator==(const Shock&) const = default;
};

inline void to_json(nlohmann::json& j, const Shock& s) {
  j = {{"kind", to_string(s.kind)}, {"targets", s.targets}, {"magnitude", s.magnitude},
       {"onset", s.onset},          {"duration", s.duration}, {"narrative", s.narrative}};
}

inline void from_json(const nlohmann::json& j, Shock& s) {
  s.kind = shock_kind_from_string(j.at("kind").get<std::string>());
  s.targets = j.at("targets").get<std::vector<std::string>>();
  s.magnitude = j.at("magnitude").get<double>();
  s.onset = j.at("onset").get<int>();
  s.duration = j.at("duration").get<int>();
  s.narrative = j.value("narrative", std::string{});
}

inline void validate_shock(const Shock& s) {
  if (s.onset < 1) throw Error(ErrorCode::InvalidConfig, "shock onset must be >= 1");
  if (s.duration < 1) throw Error(ErrorCode::InvalidConfig, "shock duration must be >= 1");
  if (!(s.magnitude >= 0.0)) throw Error(ErrorCode::InvalidConfig, "shock magnitude must be >= 0");
}

inline std::vector<Shock> parse_shock_schedule(const std::string& text) {
  std::vector<Shock> shocks;
  try {
    shocks = nlohmann::json::parse(text).get<std::vector<Shock>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("shock schedule: ") + e.what());
  }
  for (const auto& s : shocks) validate_shock(s);
  return shocks;
}

// Default schedule for semisim-v1: a standing export ban from step 1, then a
// material shortage, a sanction on the offshore foundry and a late tariff.
inline std::vector<Shock> default_shock_schedule() {
  return {
      {ShockKind::ExportBan, {"equipment->foundry-b"}, 0.0, 1, 30,
       "Export controls prohibit shipping advanced lithography tools to the offshore foundry."},
      {ShockKind::MaterialShortage, {"materials"}, 0.5, 6, 8,
       "A specialty-gas shortage halves wafer material output."},
      {ShockKind::Sanction, {"foundry-b"}, 1.0, 12, 10,
       "The offshore foundry is placed on an entity list; trading with it is now a violation."},
      {ShockKind::Tariff, {"foundry-a->integrator-b"}, 1.5, 20, 8,
       "A 50% tariff is levied on cross-border wafers shipped to integrator B."},
  };
}

// --- Intervention -------------------------------------------------------------

struct ExportParams {
  std::set<std::string> hold_nodes;  // nodes whose outbound shipments await export review
  bool operator==(const ExportParams&) const = default;
};

// Structured action. `order[e]` is what the edge's target asks to buy,
// `ship[e]` what the edge's source offers; the realized flow is their minimum
// after clipping. `external_buy` only applies to source nodes.
struct Intervention {
  std::vector<double> order;
  std::vector<double> ship;
  std::vector<double> external_buy;
  std::set<std::string> halts;
  std::optional<ExportParams> export_params;
  std::string free_text;
  int template_id = -1;
  std::string template_name;

  bool operator==(const Intervention&) const = default;
};

inline void to_json(nlohmann::json& j, const Intervention& a) {
  j = {{"template", a.template_name}, {"template_id", a.template_id}, {"order", a.order},
       {"ship", a.ship},              {"external_buy", a.external_buy}, {"halts", a.halts}};
  if (a.export_params) j["export_params"] = {{"hold_nodes", a.export_params->hold_nodes}};
  if (!a.free_text.empty()) j["free_text"] = a.free_text;
}

inline void from_json(const nlohmann::json& j, Intervention& a) {
  a.template_name = j.value("template", std::string{});
  a.template_id = j.value("template_id", -1);
  a.order = j.at("order").get<std::vector<double>>();
  a.ship = j.at("ship").get<std::vector<double>>();
  a.external_buy = j.at("external_buy").get<std::vector<double>>();
  a.halts = j.value("halts", std::set<std::string>{});
  if (j.contains("export_params"))
    a.export_params = ExportParams{j.at("export_params").at("hold_nodes").get<std::set<std::string>>()};
  a.free_text = j.value("free_text", std::string{});
}

// --- Parameters -----------------------------------------------------------------

struct RewardWeights {
  double cash = 0.5;
  double risk = 0.3;
  double violation = 0.4;
  double operability = 0.2;
  double cash_scale = 2000.0;  // currency per unit of normalized cash change
  double risk_scale = 10.0;    // risk points per unit of normalized risk change
  double stock_value = 1.0;    // weight of inventory, valued at unit cost, in the cash term
};

struct DynamicsParams {
  double gamma = 0.1;  // risk recovery rate
  double tau = 20.0;   // contagion threshold
  int t_max = 30;

  // Exogenous AR(1) demand at sink nodes.
  double demand_mean = 18.0;
  double demand_ar = 0.6;
  double demand_sd = 3.0;

  double rent_rate = 0.15;            // Gamma = rent_rate * p_sale * violating quantity
  double compliance_penalty = 25.0;   // per violating step
  double compliance_recovery = 2.0;   // per clean step
  double inbound_multiple = 2.0;      // receiving limit, multiples of effective capacity

  // Endogenous risk exposure, added before propagation.
  double idle_risk = 2.0;
  double stockout_risk = 3.0;
  double overstock_factor = 4.0;  // inventory above factor*capacity is backpressure
  double overstock_risk = 1.0;
  double violation_risk = 5.0;
  int enforcement_lag = 4;         // steps until a violation draws enforcement
  double enforcement_risk = 35.0;
  double shock_risk[kShockKinds] = {15.0, 10.0, 20.0, 5.0};  // onset exposure per kind

  // Capacity derating with risk: full capacity below `derate_start`, zero at 100.
  double derate_start = 60.0;

  double collapse_risk = 95.0;
  int collapse_window = 3;

  double observation_noise = 0.1;  // lognormal sigma on cross-tier observations
  Role agent_tier = Role::Midstream;

  RewardWeights reward;
};

// --- Inventory / cash transition ----------------------------------------------

struct CompliancePolicy {
  double penalty = 25.0;
  double recovery = 2.0;
};

// I' = I + buy - ship;  C' = C + p_sale*ship - p_cost*buy + [violate]*rent.
inline NodeState step_inventory_cash(const NodeState& state, double buy, double ship, const NodeSpec& prices,
                                     bool violate, double rent, CompliancePolicy compliance = {}) {
  if (!(buy >= 0.0) || !(ship >= 0.0)) throw Error(ErrorCode::NegativeQuantity, "buy/ship must be >= 0");
  NodeState next = state;
  next.inventory = state.inventory + buy - ship;
  next.cash = state.cash + prices.p_sale * ship - prices.p_cost * buy + (violate ? rent : 0.0);
  const double delta = violate ? -compliance.penalty : compliance.recovery;
  next.compliance = std::clamp(state.compliance + delta, 0.0, kComplianceMax);
  return next;
}

// --- Risk contagion -----------------------------------------------------------

// R'_i = clamp((1 - gamma) R_i + sum_{j in pred(i)} w_ji * max(0, R_j - tau), 0, 100).
inline std::vector<double> propagate_risk(const SupplyNetwork& net, const std::vector<double>& risks, double gamma,
                                          double tau) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::ParamOutOfRange, "gamma must lie in [0, 1]");
  if (!(tau >= 0.0)) throw Error(ErrorCode::ParamOutOfRange, "tau must be >= 0");
  if (risks.size() != net.node_count())
    throw Error(ErrorCode::DimensionMismatch, "risk vector size != node count");

  std::vector<double> next(risks.size());
  for (NodeIndex i = 0; i < risks.size(); ++i) {
    const double internal = (1.0 - gamma) * risks[i];
    double external = 0.0;
    for (const auto& p : net.predecessors(i)) external += p.weight * std::max(0.0, risks[p.node] - tau);
    next[i] = std::clamp(internal + external, 0.0, kRiskMax);
  }
  return next;
}

// --- Environment state --------------------------------------------------------

struct Constraints {
  std::vector<double> edge_cap;       // +inf when unconstrained
  std::vector<double> cost_mult;      // tariff multiplier per edge
  std::vector<double> capacity_mult;  // shortage multiplier per node
  std::vector<bool> sanctioned;

  bool operator==(const Constraints&) const = default;
};

inline Constraints baseline_constraints(const SupplyNetwork& net) {
  return {std::vector<double>(net.edge_count(), std::numeric_limits<double>::infinity()),
          std::vector<double>(net.edge_count(), 1.0), std::vector<double>(net.node_count(), 1.0),
          std::vector<bool>(net.node_count(), false)};
}

// Resolves a shock target into the edges it covers. `outbound` selects which
// side a node target expands to.
inline std::vector<EdgeIndex> resolve_edge_targets(const SupplyNetwork& net, const std::string& target, bool outbound) {
  if (auto arrow = target.find("->"); arrow != std::string::npos) {
    auto e = net.find_edge(target.substr(0, arrow), target.substr(arrow + 2));
    if (!e) throw Error(ErrorCode::UnknownTarget, "edge '" + target + "'");
    return {*e};
  }
  auto node = net.find(target);
  if (!node) throw Error(ErrorCode::UnknownTarget, "node '" + target + "'");
  std::vector<EdgeIndex> out;
  for (const auto& n : outbound ? net.successors(*node) : net.predecessors(*node)) out.push_back(n.edge);
  return out;
}

inline NodeIndex resolve_node_target(const SupplyNetwork& net, const std::string& target) {
  auto node = net.find(target);
  if (!node) throw Error(ErrorCode::UnknownTarget, "node '" + target + "'");
  return *node;
}

// Nodes whose risk is hit when the shock lands.
inline std::vector<NodeIndex> shock_exposed_nodes(const SupplyNetwork& net, const Shock& s) {
  std::set<NodeIndex> nodes;
  for (const auto& t : s.targets) {
    switch (s.kind) {
      case ShockKind::ExportBan:
        for (auto e : resolve_edge_targets(net, t, true)) {
          nodes.insert(net.edge_source(e));
          nodes.insert(net.edge_target(e));
        }
        break;
      case ShockKind::Tariff:
        for (auto e : resolve_edge_targets(net, t, false)) nodes.insert(net.edge_target(e));
        break;
      case ShockKind::MaterialShortage:
      case ShockKind::Sanction:
        nodes.insert(resolve_node_target(net, t));
        break;
    }
  }
  return {nodes.begin(), nodes.end()};
}

inline void apply_constraints(const SupplyNetwork& net, const Shock& s, Constraints& c) {
  for (const auto& t : s.targets) {
    switch (s.kind) {
      case ShockKind::ExportBan:
        for (auto e : resolve_edge_targets(net, t, true)) c.edge_cap[e] = std::min(c.edge_cap[e], s.magnitude);
        break;
      case ShockKind::Tariff:
        for (auto e : resolve_edge_targets(net, t, false)) c.cost_mult[e] *= s.magnitude;
        break;
      case ShockKind::MaterialShortage:
        c.capacity_mult[resolve_node_target(net, t)] *= s.magnitude;
        break;
      case ShockKind::Sanction:
        c.sanctioned[resolve_node_target(net, t)] = true;
        break;
    }
  }
}

inline Constraints constraints_for(const SupplyNetwork& net, const std::vector<Shock>& active) {
  Constraints c = baseline_constraints(net);
  for (const auto& s : active) apply_constraints(net, s, c);
  return c;
}

struct EnvState {
  std::shared_ptr<const SupplyNetwork> net;
  DynamicsParams params;
  std::vector<Shock> schedule;
  std::vector<Shock> active;
  Constraints constraints;
  std::vector<NodeState> nodes;
  int step = 1;  // index of the next step to execute
  std::vector<std::vector<double>> demand;  // demand[t-1][node], zero at non-sinks
  std::vector<double> last_flows;           // realized per-edge flow of the previous step
  std::vector<double> last_external;
  std::vector<double> last_demand;
  std::set<std::string> last_halts;
  std::optional<ExportParams> last_export;
  std::vector<std::pair<int, NodeIndex>> pending_enforcement;  // (due step, node)
  int high_risk_streak = 0;
  bool collapsed = false;
  bool terminal = false;

  const SupplyNetwork& network() const { return *net; }
};

inline std::vector<double> risks_of(const std::vector<NodeState>& nodes) {
  std::vector<double> r;
  r.reserve(nodes.size());
  for (const auto& n : nodes) r.push_back(n.risk);
  return r;
}

inline double mean_risk(const std::vector<NodeState>& nodes) {
  if (nodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& n : nodes) s += n.risk;
  return s / static_cast<double>(nodes.size());
}

inline double total_cash(const std::vector<NodeState>& nodes) {
  double s = 0.0;
  for (const auto& n : nodes) s += n.cash;
  return s;
}

// Steady-state flows for mean demand: each sink asks for the mean demand,
// split over its suppliers by dependency weight, recursively upstream.
inline Intervention nominal_intervention(const SupplyNetwork& net, double demand_mean) {
  Intervention a;
  a.order.assign(net.edge_count(), 0.0);
  a.external_buy.assign(net.node_count(), 0.0);
  std::vector<double> need(net.node_count(), 0.0);
  for (NodeIndex i = 0; i < net.node_count(); ++i)
    if (net.is_sink(i)) need[i] = demand_mean;
  for (NodeIndex i : net.demand_order()) {
    const auto& preds = net.predecessors(i);
    if (preds.empty()) {
      a.external_buy[i] = need[i];
      continue;
    }
    double wsum = 0.0;
    for (const auto& p : preds) wsum += p.weight;
    for (const auto& p : preds) {
      const double share = wsum > 0.0 ? p.weight / wsum : 1.0 / static_cast<double>(preds.size());
      a.order[p.edge] += need[i] * share;
      need[p.node] += need[i] * share;
    }
  }
  a.ship = a.order;
  a.template_name = "nominal";
  return a;
}

inline void validate_schedule(const SupplyNetwork& net, const std::vector<Shock>& schedule) {
  for (const auto& s : schedule) {
    validate_shock(s);
    Constraints scratch = baseline_constraints(net);
    apply_constraints(net, s, scratch);  // throws UnknownTarget
  }
}

inline EnvState make_env(std::shared_ptr<const SupplyNetwork> net, std::vector<Shock> schedule, DynamicsParams params,
                         std::uint64_t seed, double feature_mean = kDefaultFeatureMean, const StateMapping& map = {}) {
  validate_schedule(*net, schedule);
  if (params.t_max < 1) throw Error(ErrorCode::InvalidConfig, "t_max must be >= 1");
  EnvState env;
  env.nodes = init_states(*net, seed, feature_mean, map);
  env.params = params;
  env.schedule = std::move(schedule);
  env.constraints = baseline_constraints(*net);

  Rng rng = make_rng(seed, {stream::kDemand});
  std::normal_distribution<double> eps(0.0, params.demand_sd);
  std::vector<double> level(net->node_count(), params.demand_mean);
  env.demand.assign(params.t_max, std::vector<double>(net->node_count(), 0.0));
  for (int t = 0; t < params.t_max; ++t)
    for (NodeIndex i = 0; i < net->node_count(); ++i) {
      if (!net->is_sink(i)) continue;
      level[i] = std::max(0.0, params.demand_mean + params.demand_ar * (level[i] - params.demand_mean) + eps(rng));
      env.demand[t][i] = level[i];
    }

  const Intervention nominal = nominal_intervention(*net, params.demand_mean);
  env.last_flows = nominal.order;
  env.last_external = nominal.external_buy;
  env.last_demand.assign(net->node_count(), 0.0);
  for (NodeIndex i = 0; i < net->node_count(); ++i)
    if (net->is_sink(i)) env.last_demand[i] = params.demand_mean;
  env.net = std::move(net);
  return env;
}

// Activates `shock` at the current step: constraints tighten and targets take
// the onset risk hit. Constraints are rebuilt from the active set, so removal
// at expiry restores the baseline exactly.
inline void apply_shock(EnvState& env, const Shock& shock) {
  if (shock.onset != env.step)
    throw Error(ErrorCode::ParamOutOfRange, "shock onset " + std::to_string(shock.onset) + " != current step " +
                                                std::to_string(env.step));
  const auto exposed = shock_exposed_nodes(*env.net, shock);  // validates targets
  env.active.push_back(shock);
  env.constraints = constraints_for(*env.net, env.active);
  const double hit = env.params.shock_risk[static_cast<int>(shock.kind)];
  for (auto i : exposed) env.nodes[i].risk = std::clamp(env.nodes[i].risk + hit, 0.0, kRiskMax);
}

inline void expire_shocks(EnvState& env) {
  const auto before = env.active.size();
  std::erase_if(env.active, [&](const Shock& s) { return s.end() <= env.step; });
  if (env.active.size() != before) env.constraints = constraints_for(*env.net, env.active);
}

// Brings the shock set up to date for the step about to execute.
inline void advance_shocks(EnvState& env) {
  expire_shocks(env);
  for (const auto& s : env.schedule)
    if (s.onset == env.step) apply_shock(env, s);
}

// --- Observation / feedback ---------------------------------------------------

struct Observation {
  int step = 1;
  int t_max = 30;
  std::vector<NodeState> nodes;  // exact for the agent's tier, noisy elsewhere
  std::vector<bool> exact;
  std::vector<Shock> shocks;     // currently active, public news
  std::vector<double> last_demand;
  std::vector<double> last_flows;
  std::vector<double> last_external;

  bool operator==(const Observation&) const = default;
};

inline void to_json(nlohmann::json& j, const Observation& o) {
  j = {{"step", o.step},
       {"t_max", o.t_max},
       {"nodes", o.nodes},
       {"exact", o.exact},
       {"shocks", o.shocks},
       {"last_demand", o.last_demand},
       {"last_flows", o.last_flows},
       {"last_external", o.last_external}};
}

inline void from_json(const nlohmann::json& j, Observation& o) {
  o.step = j.at("step").get<int>();
  o.t_max = j.at("t_max").get<int>();
  o.nodes = j.at("nodes").get<std::vector<NodeState>>();
  o.exact = j.at("exact").get<std::vector<bool>>();
  o.shocks = j.at("shocks").get<std::vector<Shock>>();
  o.last_demand = j.at("last_demand").get<std::vector<double>>();
  o.last_flows = j.at("last_flows").get<std::vector<double>>();
  o.last_external = j.at("last_external").get<std::vector<double>>();
}

// Shocks visible to the agent at its next decision: those already active plus
// those whose onset is the step about to run (announced before execution).
inline std::vector<Shock> visible_shocks(const EnvState& env) {
  std::vector<Shock> out;
  for (const auto& s : env.active)
    if (s.end() > env.step) out.push_back(s);
  for (const auto& s : env.schedule)
    if (s.onset == env.step) out.push_back(s);
  return out;
}

inline Observation observe(const EnvState& env, Rng& rng) {
  const auto& net = *env.net;
  Observation o;
  o.step = env.step;
  o.t_max = env.params.t_max;
  o.nodes = env.nodes;
  o.exact.assign(net.node_count(), true);
  std::normal_distribution<double> noise(0.0, env.params.observation_noise);
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    if (net.node(i).role == env.params.agent_tier) continue;
    o.exact[i] = false;
    auto& n = o.nodes[i];
    n.inventory *= std::exp(noise(rng));
    n.cash *= std::exp(noise(rng));
    n.compliance = std::clamp(n.compliance * std::exp(noise(rng)), 0.0, kComplianceMax);
    n.risk = std::clamp(n.risk * std::exp(noise(rng)), 0.0, kRiskMax);
  }
  o.shocks = visible_shocks(env);
  o.last_demand = env.last_demand;
  o.last_flows = env.last_flows;
  o.last_external = env.last_external;
  return o;
}

struct ExecFeedback {
  int step = 0;
  std::vector<double> requested_flow;  // per edge, min(order, ship)
  std::vector<double> realized_flow;   // per edge
  std::vector<double> external_buy;    // per node, realized
  std::vector<double> market_sales;    // per node (sinks)
  std::vector<double> demand;          // per node (sinks)
  std::vector<double> node_buy;        // q_buy per node
  std::vector<double> node_ship;       // q_ship per node
  std::vector<bool> violation;         // 1_violate per node
  std::vector<double> rent;            // Gamma collected per node
  double rent_total = 0.0;
  double stock_value_change = 0.0;     // sum over nodes of p_cost * (I' - I)
  double clipped_total = 0.0;          // requested minus realized, summed over edges and external buys
  int violations = 0;                  // number of violating nodes
  double operability = 0.0;            // fraction of nodes with positive throughput
  std::vector<double> risk_before;
  std::vector<NodeState> states_after;
  double reward = 0.0;                 // r_exec in [-1, 1]
  bool collapse = false;
  bool terminal = false;

  bool operator==(const ExecFeedback&) const = default;
};

inline void to_json(nlohmann::json& j, const ExecFeedback& f) {
  j = {{"step", f.step},
       {"requested_flow", f.requested_flow},
       {"realized_flow", f.realized_flow},
       {"external_buy", f.external_buy},
       {"market_sales", f.market_sales},
       {"demand", f.demand},
       {"node_buy", f.node_buy},
       {"node_ship", f.node_ship},
       {"violation", f.violation},
       {"rent", f.rent},
       {"rent_total", f.rent_total},
       {"stock_value_change", f.stock_value_change},
       {"clipped_total", f.clipped_total},
       {"violations", f.violations},
       {"operability", f.operability},
       {"risk_before", f.risk_before},
       {"states_after", f.states_after},
       {"reward", f.reward},
       {"collapse", f.collapse},
       {"terminal", f.terminal}};
}

inline void from_json(const nlohmann::json& j, ExecFeedback& f) {
  f.step = j.at("step").get<int>();
  f.requested_flow = j.at("requested_flow").get<std::vector<double>>();
  f.realized_flow = j.at("realized_flow").get<std::vector<double>>();
  f.external_buy = j.at("external_buy").get<std::vector<double>>();
  f.market_sales = j.at("market_sales").get<std::vector<double>>();
  f.demand = j.at("demand").get<std::vector<double>>();
  f.node_buy = j.at("node_buy").get<std::vector<double>>();
  f.node_ship = j.at("node_ship").get<std::vector<double>>();
  f.violation = j.at("violation").get<std::vector<bool>>();
  f.rent = j.at("rent").get<std::vector<double>>();
  f.rent_total = j.at("rent_total").get<double>();
  f.stock_value_change = j.value("stock_value_change", 0.0);
  f.clipped_total = j.at("clipped_total").get<double>();
  f.violations = j.at("violations").get<int>();
  f.operability = j.at("operability").get<double>();
  f.risk_before = j.at("risk_before").get<std::vector<double>>();
  f.states_after = j.at("states_after").get<std::vector<NodeState>>();
  f.reward = j.at("reward").get<double>();
  f.collapse = j.at("collapse").get<bool>();
  f.terminal = j.at("terminal").get<bool>();
}

// r_exec = clamp(w_c*dC - w_r*dR - w_v*violations + w_o*operability, -1, 1),
// with dC the total cash change plus stock_value * (inventory change at unit
// cost), over cash_scale, dR the mean-risk change over
// risk_scale, violations and operability as node fractions. A collapse step
// scores -1.
inline double compute_exec_reward(const std::vector<NodeState>& before, const std::vector<NodeState>& after,
                                  const ExecFeedback& feedback, const RewardWeights& w = {}) {
  if (feedback.collapse) return -1.0;
  const double n = static_cast<double>(std::max<std::size_t>(1, after.size()));
  const double d_cash =
      (total_cash(after) - total_cash(before) + w.stock_value * feedback.stock_value_change) / w.cash_scale;
  const double d_risk = (mean_risk(after) - mean_risk(before)) / w.risk_scale;
  const double violations = static_cast<double>(feedback.violations) / n;
  const double r = w.cash * d_cash - w.risk * d_risk - w.violation * violations + w.operability * feedback.operability;
  return std::clamp(r, -1.0, 1.0);
}

inline double risk_capacity_factor(double risk, double derate_start) {
  if (risk <= derate_start) return 1.0;
  return std::clamp((kRiskMax - risk) / (kRiskMax - derate_start), 0.0, 1.0);
}

// Scales the entries of `values` selected by `idx` down so their sum is at most `limit`.
inline void scale_to_limit(std::vector<double>& values, const std::vector<EdgeIndex>& idx, double limit) {
  double sum = 0.0;
  for (auto e : idx) sum += values[e];
  if (sum <= limit || sum <= 0.0) return;
  const double f = std::max(0.0, limit) / sum;
  for (auto e : idx) values[e] *= f;
}

struct StepResult {
  Observation observation;
  ExecFeedback feedback;
};

inline void check_quantities(const std::vector<double>& v, std::size_t n, const char* what) {
  if (!v.empty() && v.size() != n)
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + " has wrong length");
  for (double x : v)
    if (!(x >= 0.0) || !std::isfinite(x)) throw Error(ErrorCode::NegativeQuantity, std::string(what) + " entry");
}

// Advances `env` by one step under `action`. `rng` only drives observation noise;
// demand paths and shocks are fixed at construction, so the transition and its
// reward are a deterministic function of (env, action).
inline StepResult env_step(EnvState& env, const Intervention& action, Rng& rng) {
  if (env.terminal) throw Error(ErrorCode::EpisodeTerminated, "step " + std::to_string(env.step));
  const auto& net = *env.net;
  const auto& P = env.params;
  const std::size_t n_nodes = net.node_count(), n_edges = net.edge_count();
  check_quantities(action.order, n_edges, "order");
  check_quantities(action.ship, n_edges, "ship");
  check_quantities(action.external_buy, n_nodes, "external_buy");
  for (const auto& h : action.halts)
    if (!net.find(h)) throw Error(ErrorCode::UnknownNode, "halt target '" + h + "'");

  advance_shocks(env);
  const int t = env.step;
  const auto before = env.nodes;
  const auto& C = env.constraints;

  ExecFeedback fb;
  fb.step = t;
  fb.risk_before = risks_of(before);

  std::vector<bool> halted(n_nodes, false), export_hold(n_nodes, false);
  for (const auto& h : action.halts) halted[net.index_of(h)] = true;
  if (action.export_params)
    for (const auto& h : action.export_params->hold_nodes)
      if (auto i = net.find(h)) export_hold[*i] = true;

  std::vector<double> eff_cap(n_nodes);
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    eff_cap[i] = halted[i] ? 0.0
                           : net.node(i).capacity * C.capacity_mult[i] *
                                 risk_capacity_factor(before[i].risk, P.derate_start);
  }

  // Edge flows: min(order, ship), then halts, export review, bans, source limits, receiver limits.
  auto at = [](const std::vector<double>& v, std::size_t k) { return v.empty() ? 0.0 : v[k]; };
  std::vector<double> flow(n_edges);
  fb.requested_flow.resize(n_edges);
  for (EdgeIndex e = 0; e < n_edges; ++e) {
    const double req = std::min(at(action.order, e), at(action.ship, e));
    fb.requested_flow[e] = req;
    const NodeIndex src = net.edge_source(e), dst = net.edge_target(e);
    double q = req;
    if (halted[src] || halted[dst] || export_hold[src]) q = 0.0;
    flow[e] = std::min(q, C.edge_cap[e]);
  }
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    std::vector<EdgeIndex> out;
    for (const auto& s : net.successors(i)) out.push_back(s.edge);
    scale_to_limit(flow, out, std::min(before[i].inventory, eff_cap[i]));
  }
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    std::vector<EdgeIndex> in;
    for (const auto& p : net.predecessors(i)) in.push_back(p.edge);
    scale_to_limit(flow, in, eff_cap[i] * P.inbound_multiple);
  }
  fb.realized_flow = flow;

  fb.external_buy.assign(n_nodes, 0.0);
  fb.market_sales.assign(n_nodes, 0.0);
  fb.demand.assign(n_nodes, 0.0);
  double clipped = 0.0;
  for (EdgeIndex e = 0; e < n_edges; ++e) clipped += fb.requested_flow[e] - flow[e];
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    const double want = at(action.external_buy, i);
    if (net.is_source(i)) fb.external_buy[i] = std::min(want, eff_cap[i] * P.inbound_multiple);
    clipped += want - fb.external_buy[i];
    if (net.is_sink(i)) {
      fb.demand[i] = env.demand[static_cast<std::size_t>(t - 1)][i];
      fb.market_sales[i] = std::min({fb.demand[i], before[i].inventory, eff_cap[i]});
    }
  }
  fb.clipped_total = clipped;

  // Violations: any realized trade touching a sanctioned node.
  fb.violation.assign(n_nodes, false);
  std::vector<double> violating_qty(n_nodes, 0.0);
  for (EdgeIndex e = 0; e < n_edges; ++e) {
    const NodeIndex src = net.edge_source(e), dst = net.edge_target(e);
    if (flow[e] > 0.0 && (C.sanctioned[src] || C.sanctioned[dst])) {
      fb.violation[src] = fb.violation[dst] = true;
      violating_qty[src] += flow[e];
      violating_qty[dst] += flow[e];
    }
  }

  fb.node_buy.assign(n_nodes, 0.0);
  fb.node_ship.assign(n_nodes, 0.0);
  fb.rent.assign(n_nodes, 0.0);
  std::vector<double> purchase_cost(n_nodes, 0.0);
  for (EdgeIndex e = 0; e < n_edges; ++e) {
    const NodeIndex src = net.edge_source(e), dst = net.edge_target(e);
    fb.node_ship[src] += flow[e];
    fb.node_buy[dst] += flow[e];
    purchase_cost[dst] += flow[e] * net.node(dst).p_cost * C.cost_mult[e];
  }
  int operating = 0;
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    fb.node_buy[i] += fb.external_buy[i];
    fb.node_ship[i] += fb.market_sales[i];
    purchase_cost[i] += fb.external_buy[i] * net.node(i).p_cost;
    if (fb.node_buy[i] + fb.node_ship[i] > 0.0) ++operating;
  }
  fb.operability = static_cast<double>(operating) / static_cast<double>(n_nodes);

  // Inventory / cash / compliance.
  const CompliancePolicy compliance{P.compliance_penalty, P.compliance_recovery};
  std::vector<double> exposure = fb.risk_before;
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    NodeSpec prices = net.node(i);
    if (fb.node_buy[i] > 0.0) prices.p_cost = purchase_cost[i] / fb.node_buy[i];
    if (fb.violation[i]) {
      fb.rent[i] = P.rent_rate * prices.p_sale * violating_qty[i];
      fb.rent_total += fb.rent[i];
      ++fb.violations;
    }
    env.nodes[i] = step_inventory_cash(before[i], fb.node_buy[i], fb.node_ship[i], prices, fb.violation[i],
                                       fb.rent[i], compliance);
    // Numerical guard: ship never exceeds start-of-step inventory.
    env.nodes[i].inventory = std::max(0.0, env.nodes[i].inventory);

    double& x = exposure[i];
    if (fb.node_buy[i] + fb.node_ship[i] <= 0.0) x += P.idle_risk;
    if (fb.demand[i] > 0.0) x += P.stockout_risk * (fb.demand[i] - fb.market_sales[i]) / fb.demand[i];
    const double stock_limit = P.overstock_factor * net.node(i).capacity;
    if (env.nodes[i].inventory > stock_limit)
      x += P.overstock_risk * (env.nodes[i].inventory - stock_limit) / net.node(i).capacity;
    if (fb.violation[i]) {
      x += P.violation_risk;
      env.pending_enforcement.emplace_back(t + P.enforcement_lag, i);
    }
  }
  for (const auto& [due, node] : env.pending_enforcement)
    if (due == t) exposure[node] += P.enforcement_risk;
  std::erase_if(env.pending_enforcement, [&](const auto& p) { return p.first <= t; });
  for (auto& x : exposure) x = std::clamp(x, 0.0, kRiskMax);

  const auto risk_next = propagate_risk(net, exposure, P.gamma, P.tau);
  for (NodeIndex i = 0; i < n_nodes; ++i) {
    env.nodes[i].risk = risk_next[i];
    env.nodes[i].operable = risk_next[i] < kRiskMax;
  }

  env.high_risk_streak = mean_risk(env.nodes) >= P.collapse_risk ? env.high_risk_streak + 1 : 0;
  fb.collapse = env.high_risk_streak >= P.collapse_window;
  env.collapsed = fb.collapse;

  fb.states_after = env.nodes;
  for (NodeIndex i = 0; i < n_nodes; ++i)
    fb.stock_value_change += net.node(i).p_cost * (env.nodes[i].inventory - before[i].inventory);
  fb.reward = compute_exec_reward(before, env.nodes, fb, P.reward);

  env.last_flows = flow;
  env.last_external = fb.external_buy;
  for (NodeIndex i = 0; i < n_nodes; ++i)
    if (net.is_sink(i)) env.last_demand[i] = fb.demand[i];
  env.last_halts = action.halts;
  env.last_export = action.export_params;
  ++env.step;
  env.terminal = fb.collapse || env.step > P.t_max;
  fb.terminal = env.terminal;
  if (!env.terminal) expire_shocks(env);

  return {observe(env, rng), std::move(fb)};
}

// "Hold" continuation: repeat the last realized quantities and halts.
inline Intervention hold_intervention(const EnvState& env) {
  Intervention a;
  a.order = env.last_flows;
  a.ship = env.last_flows;
  a.external_buy = env.last_external;
  a.halts = env.last_halts;
  a.export_params = env.last_export;
  a.template_name = "hold";
  return a;
}

// Order-sensitive hash of everything that determines future transitions.
inline std::uint64_t fingerprint(const EnvState& env) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(env.step));
  auto feed = [&](double x) {
    std::uint64_t bits;
    static_assert(sizeof bits == sizeof x);
    std::memcpy(&bits, &x, sizeof x);
    h = mix64(h ^ bits);
  };
  for (const auto& n : env.nodes) {
    feed(n.inventory);
    feed(n.cash);
    feed(n.compliance);
    feed(n.risk);
  }
  for (double x : env.last_flows) feed(x);
  for (double x : env.last_external) feed(x);
  for (const auto& [due, node] : env.pending_enforcement) {
    feed(due);
    feed(static_cast<double>(node));
  }
  feed(static_cast<double>(env.active.size()));
  feed(env.high_risk_streak);
  return h;
}

// --- DynamicsParams JSON ----------------------------------------------------------

inline void to_json(nlohmann::json& j, const DynamicsParams& p) {
  j = {{"gamma", p.gamma},
       {"tau", p.tau},
       {"t_max", p.t_max},
       {"demand_mean", p.demand_mean},
       {"demand_ar", p.demand_ar},
       {"demand_sd", p.demand_sd},
       {"rent_rate", p.rent_rate},
       {"compliance_penalty", p.compliance_penalty},
       {"compliance_recovery", p.compliance_recovery},
       {"inbound_multiple", p.inbound_multiple},
       {"idle_risk", p.idle_risk},
       {"stockout_risk", p.stockout_risk},
       {"overstock_factor", p.overstock_factor},
       {"overstock_risk", p.overstock_risk},
       {"violation_risk", p.violation_risk},
       {"enforcement_lag", p.enforcement_lag},
       {"enforcement_risk", p.enforcement_risk},
       {"shock_risk", std::vector<double>(std::begin(p.shock_risk), std::end(p.shock_risk))},
       {"derate_start", p.derate_start},
       {"collapse_risk", p.collapse_risk},
       {"collapse_window", p.collapse_window},
       {"observation_noise", p.observation_noise},
       {"agent_tier", to_string(p.agent_tier)},
       {"reward",
        {{"cash", p.reward.cash},
         {"risk", p.reward.risk},
         {"violation", p.reward.violation},
         {"operability", p.reward.operability},
         {"cash_scale", p.reward.cash_scale},
         {"risk_scale", p.reward.risk_scale},
         {"stock_value", p.reward.stock_value}}}};
}

inline void from_json(const nlohmann::json& j, DynamicsParams& p) {
  const DynamicsParams d;
  p.gamma = j.value("gamma", d.gamma);
  p.tau = j.value("tau", d.tau);
  p.t_max = j.value("t_max", d.t_max);
  p.demand_mean = j.value("demand_mean", d.demand_mean);
  p.demand_ar = j.value("demand_ar", d.demand_ar);
  p.demand_sd = j.value("demand_sd", d.demand_sd);
  p.rent_rate = j.value("rent_rate", d.rent_rate);
  p.compliance_penalty = j.value("compliance_penalty", d.compliance_penalty);
  p.compliance_recovery = j.value("compliance_recovery", d.compliance_recovery);
  p.inbound_multiple = j.value("inbound_multiple", d.inbound_multiple);
  p.idle_risk = j.value("idle_risk", d.idle_risk);
  p.stockout_risk = j.value("stockout_risk", d.stockout_risk);
  p.overstock_factor = j.value("overstock_factor", d.overstock_factor);
  p.overstock_risk = j.value("overstock_risk", d.overstock_risk);
  p.violation_risk = j.value("violation_risk", d.violation_risk);
  p.enforcement_lag = j.value("enforcement_lag", d.enforcement_lag);
  p.enforcement_risk = j.value("enforcement_risk", d.enforcement_risk);
  if (j.contains("shock_risk")) {
    const auto v = j.at("shock_risk").get<std::vector<double>>();
    if (v.size() != kShockKinds) throw Error(ErrorCode::InvalidConfig, "shock_risk needs 4 entries");
    std::copy(v.begin(), v.end(), p.shock_risk);
  }
  p.derate_start = j.value("derate_start", d.derate_start);
  p.collapse_risk = j.value("collapse_risk", d.collapse_risk);
  p.collapse_window = j.value("collapse_window", d.collapse_window);
  p.observation_noise = j.value("observation_noise", d.observation_noise);
  p.agent_tier = role_from_string(j.value("agent_tier", to_string(d.agent_tier)));
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    p.reward.cash = r.value("cash", d.reward.cash);
    p.reward.risk = r.value("risk", d.reward.risk);
    p.reward.violation = r.value("violation", d.reward.violation);
    p.reward.operability = r.value("operability", d.reward.operability);
    p.reward.cash_scale = r.value("cash_scale", d.reward.cash_scale);
    p.reward.risk_scale = r.value("risk_scale", d.reward.risk_scale);
    p.reward.stock_value = r.value("stock_value", d.reward.stock_value);
  }
  if (!(p.gamma >= 0.0 && p.gamma <= 1.0) || !(p.tau >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "gamma must lie in [0,1] and tau >= 0");
  if (p.t_max < 1) throw Error(ErrorCode::InvalidConfig, "t_max must be >= 1");
}

}  // namespace reflplan
