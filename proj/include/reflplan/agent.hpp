#pragma once
//
// Actor policy and critics.
//
// The actor chooses among a finite library of intervention templates. Each
// template is a deterministic function of the prompt context, so a sampled
// action's log-probability is exactly the log-softmax of its template logit.
// Three actor backends share that contract: scripted (one rule, probability 1),
// parametric (softmax over theta * phi(ctx) / T, trainable) and an LLM adapter
// (inference only).
//

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dynamics.hpp"
#include "error.hpp"
#include "hindsight.hpp"
#include "llm_adapter.hpp"
#include "rng.hpp"
#include "supply_graph.hpp"

namespace reflplan {

// --- Templates --------------------------------------------------------------------

enum class TemplateKind {
  Hold,
  IgnoreShocks,
  Reroute,
  MultiSourceSplit,
  ScaleUp,
  ScaleDown,
  RebuildInventory,
  DrainInventory,
  HaltExposed,
  HaltAll,
  SetExportParams,
  Surge,
};

inline const std::vector<TemplateKind>& all_templates() {
  static const std::vector<TemplateKind> lib = {
      TemplateKind::Hold,           TemplateKind::IgnoreShocks,     TemplateKind::Reroute,
      TemplateKind::MultiSourceSplit, TemplateKind::ScaleUp,        TemplateKind::ScaleDown,
      TemplateKind::RebuildInventory, TemplateKind::DrainInventory, TemplateKind::HaltExposed,
      TemplateKind::HaltAll,        TemplateKind::SetExportParams,  TemplateKind::Surge,
  };
  return lib;
}

inline std::string to_string(TemplateKind k) {
  switch (k) {
    case TemplateKind::Hold: return "hold";
    case TemplateKind::IgnoreShocks: return "ignore_shocks";
    case TemplateKind::Reroute: return "reroute";
    case TemplateKind::MultiSourceSplit: return "multi_source_split";
    case TemplateKind::ScaleUp: return "scale_up";
    case TemplateKind::ScaleDown: return "scale_down";
    case TemplateKind::RebuildInventory: return "rebuild_inventory";
    case TemplateKind::DrainInventory: return "drain_inventory";
    case TemplateKind::HaltExposed: return "halt_exposed";
    case TemplateKind::HaltAll: return "halt_all";
    case TemplateKind::SetExportParams: return "set_export_params";
    case TemplateKind::Surge: return "surge";
  }
  return "hold";
}

inline std::optional<TemplateKind> template_from_string(const std::string& s) {
  for (auto k : all_templates())
    if (to_string(k) == s) return k;
  return std::nullopt;
}

inline std::string template_description(TemplateKind k) {
  switch (k) {
    case TemplateKind::Hold: return "repeat last step's realized quantities";
    case TemplateKind::IgnoreShocks: return "plan nominal flows as if no policy shock were active";
    case TemplateKind::Reroute: return "reroute procurement around banned links and sanctioned entities";
    case TemplateKind::MultiSourceSplit: return "split procurement evenly over every compliant supplier";
    case TemplateKind::ScaleUp: return "compliant plan with procurement scaled up 30%";
    case TemplateKind::ScaleDown: return "compliant plan with procurement scaled down 30%";
    case TemplateKind::RebuildInventory: return "compliant plan targeting a deep safety stock";
    case TemplateKind::DrainInventory: return "compliant plan that runs down safety stock";
    case TemplateKind::HaltExposed: return "halt every entity touched by an active shock";
    case TemplateKind::HaltAll: return "halt all trade until the situation clears";
    case TemplateKind::SetExportParams: return "hold exports on banned links pending licences and stockpile";
    case TemplateKind::Surge: return "push 50% above demand on every link, ignoring restrictions";
  }
  return "";
}

// Flow planner shared by the templates.
struct PlanOptions {
  double demand_mult = 1.0;
  bool avoid_banned = true;
  bool avoid_sanctioned = true;
  bool even_split = false;
  double safety_stock = 1.5;  // target stock, multiples of planned throughput
  double restock_gain = 0.5;
  bool respect_caps = true;
};

inline double estimated_capacity(const SupplyNetwork& net, const Observation& obs, const Constraints& c, NodeIndex i,
                                 bool with_risk = true) {
  const double base = net.node(i).capacity * c.capacity_mult[i];
  return with_risk ? base * risk_capacity_factor(obs.nodes.at(i).risk, DynamicsParams{}.derate_start) : base;
}

// Base-stock plan from the observation: sinks forecast last demand, each node
// orders throughput plus a restock term, allocated over permitted suppliers.
inline Intervention plan_flows(const SupplyNetwork& net, const Observation& obs, const PlanOptions& opt) {
  const Constraints c = constraints_for(net, obs.shocks);
  const std::size_t nn = net.node_count(), ne = net.edge_count();
  Intervention a;
  a.order.assign(ne, 0.0);
  a.external_buy.assign(nn, 0.0);

  auto blocked = [&](EdgeIndex e) {
    const NodeIndex s = net.edge_source(e), d = net.edge_target(e);
    return (opt.avoid_banned && c.edge_cap[e] <= 0.0) || (opt.avoid_sanctioned && (c.sanctioned[s] || c.sanctioned[d]));
  };

  std::vector<double> outflow(nn, 0.0);
  for (NodeIndex i = 0; i < nn; ++i)
    if (net.is_sink(i) && !obs.last_demand.empty()) outflow[i] = obs.last_demand[i] * opt.demand_mult;

  for (NodeIndex i : net.demand_order()) {
    if (opt.avoid_sanctioned && c.sanctioned[i]) continue;
    double through = outflow[i];
    if (opt.respect_caps) through = std::min(through, estimated_capacity(net, obs, c, i));
    double buy = std::max(0.0, through + opt.restock_gain * (opt.safety_stock * through - obs.nodes[i].inventory));
    if (opt.respect_caps) buy = std::min(buy, 2.0 * estimated_capacity(net, obs, c, i));
    if (net.is_source(i)) {
      a.external_buy[i] = buy;
      continue;
    }
    std::vector<Neighbor> allowed;
    for (const auto& p : net.predecessors(i))
      if (!blocked(p.edge)) allowed.push_back(p);
    if (allowed.empty()) continue;
    double wsum = 0.0;
    for (const auto& p : allowed) wsum += opt.even_split ? 1.0 : p.weight;
    double leftover = 0.0;
    std::vector<double> alloc(allowed.size());
    for (std::size_t k = 0; k < allowed.size(); ++k) {
      const double share = wsum > 0.0 ? (opt.even_split ? 1.0 : allowed[k].weight) / wsum
                                      : 1.0 / static_cast<double>(allowed.size());
      alloc[k] = buy * share;
      const double cap = c.edge_cap[allowed[k].edge];
      if (opt.avoid_banned && alloc[k] > cap) {
        leftover += alloc[k] - cap;
        alloc[k] = cap;
      }
    }
    if (leftover > 0.0) {
      std::vector<std::size_t> open;
      for (std::size_t k = 0; k < allowed.size(); ++k)
        if (!std::isfinite(c.edge_cap[allowed[k].edge])) open.push_back(k);
      for (auto k : open) alloc[k] += leftover / static_cast<double>(open.size());
    }
    for (std::size_t k = 0; k < allowed.size(); ++k) {
      a.order[allowed[k].edge] += alloc[k];
      outflow[allowed[k].node] += alloc[k];
    }
  }

  a.ship = a.order;
  if (opt.respect_caps) {
    for (NodeIndex i = 0; i < nn; ++i) {
      std::vector<EdgeIndex> out;
      for (const auto& s : net.successors(i)) out.push_back(s.edge);
      scale_to_limit(a.ship, out, std::min(obs.nodes[i].inventory, estimated_capacity(net, obs, c, i)));
    }
  }
  return a;
}

inline std::set<std::string> shock_exposed_ids(const SupplyNetwork& net, const std::vector<Shock>& shocks) {
  std::set<std::string> ids;
  for (const auto& s : shocks)
    for (auto i : shock_exposed_nodes(net, s)) ids.insert(net.node(i).id);
  return ids;
}

// --- Prompt context -------------------------------------------------------------

struct PromptContext {
  std::string task;
  Observation observation;
  std::optional<Intervention> previous_action;
  std::vector<std::string> shock_narratives;
  std::vector<std::string> history;  // digest of the last few steps
};

inline const std::string& default_task() {
  static const std::string task =
      "Keep the semiconductor supply network operating and profitable through policy shocks while staying "
      "compliant with export controls and sanctions and containing systemic risk.";
  return task;
}

inline PromptContext make_context(const Observation& obs, std::optional<Intervention> previous,
                                  std::vector<std::string> history, std::string task = default_task()) {
  PromptContext ctx;
  ctx.task = std::move(task);
  ctx.observation = obs;
  ctx.previous_action = std::move(previous);
  for (const auto& s : obs.shocks) ctx.shock_narratives.push_back(s.narrative);
  ctx.history = std::move(history);
  return ctx;
}

inline std::string describe_action(const SupplyNetwork& net, const Intervention& a) {
  std::ostringstream os;
  os << "template=" << (a.template_name.empty() ? "custom" : a.template_name);
  for (EdgeIndex e = 0; e < net.edge_count(); ++e) {
    const double q = std::min(a.order.empty() ? 0.0 : a.order[e], a.ship.empty() ? 0.0 : a.ship[e]);
    if (q > 0.0) os << "; " << net.edge(e).from << "->" << net.edge(e).to << "=" << std::lround(q);
  }
  for (NodeIndex i = 0; i < net.node_count(); ++i)
    if (!a.external_buy.empty() && a.external_buy[i] > 0.0)
      os << "; " << net.node(i).id << " buys " << std::lround(a.external_buy[i]);
  for (const auto& h : a.halts) os << "; halt " << h;
  if (a.export_params)
    for (const auto& h : a.export_params->hold_nodes) os << "; export review " << h;
  if (!a.free_text.empty()) os << "; note: " << a.free_text;
  return os.str();
}

inline std::string to_prompt(const SupplyNetwork& net, const PromptContext& ctx) {
  std::ostringstream os;
  os << "Task: " << ctx.task << "\n";
  os << "Step " << ctx.observation.step << " of " << ctx.observation.t_max << ".\n";
  os << "Entities:\n";
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const auto& s = ctx.observation.nodes[i];
    os << "  " << net.node(i).id << " (" << to_string(net.node(i).role) << ", " << net.node(i).label
       << "): inventory " << std::lround(s.inventory) << ", cash " << std::lround(s.cash) << ", compliance "
       << std::lround(s.compliance) << ", risk " << std::lround(s.risk)
       << (ctx.observation.exact[i] ? "" : " (estimated)") << "\n";
  }
  os << "Active policy events:\n";
  if (ctx.shock_narratives.empty()) os << "  none\n";
  for (const auto& n : ctx.shock_narratives) os << "  - " << n << "\n";
  if (ctx.previous_action) os << "Previous action: " << describe_action(net, *ctx.previous_action) << "\n";
  if (!ctx.history.empty()) {
    os << "Recent history:\n";
    for (const auto& h : ctx.history) os << "  " << h << "\n";
  }
  return os.str();
}

// phi(ctx): per node (I/4cap, tanh(C/20000), Omega/100, R/100), active shock
// kinds, step/t_max and a bias term.
inline std::size_t context_feature_dim(const SupplyNetwork& net) { return 4 * net.node_count() + kShockKinds + 2; }

inline std::vector<double> context_features(const SupplyNetwork& net, const PromptContext& ctx) {
  std::vector<double> phi(context_feature_dim(net), 0.0);
  const auto& obs = ctx.observation;
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const auto& s = obs.nodes.at(i);
    phi[4 * i] = s.inventory / (4.0 * net.node(i).capacity);
    phi[4 * i + 1] = std::tanh(s.cash / 20000.0);
    phi[4 * i + 2] = s.compliance / 100.0;
    phi[4 * i + 3] = s.risk / 100.0;
  }
  const std::size_t base = 4 * net.node_count();
  for (const auto& s : obs.shocks) phi[base + static_cast<std::size_t>(s.kind)] = 1.0;
  phi[base + kShockKinds] = static_cast<double>(obs.step) / static_cast<double>(std::max(1, obs.t_max));
  phi[base + kShockKinds + 1] = 1.0;
  return phi;
}

// Instantiates template `kind` against the context.
inline Intervention instantiate(const SupplyNetwork& net, TemplateKind kind, const PromptContext& ctx) {
  const auto& obs = ctx.observation;
  Intervention a;
  PlanOptions opt;
  switch (kind) {
    case TemplateKind::Hold:
      a.order = obs.last_flows;
      a.ship = obs.last_flows;
      a.external_buy = obs.last_external;
      if (ctx.previous_action) {
        a.halts = ctx.previous_action->halts;
        a.export_params = ctx.previous_action->export_params;
      }
      break;
    case TemplateKind::IgnoreShocks:
      opt.avoid_banned = opt.avoid_sanctioned = false;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::Reroute:
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::MultiSourceSplit:
      opt.even_split = true;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::ScaleUp:
      opt.demand_mult = 1.3;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::ScaleDown:
      opt.demand_mult = 0.7;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::RebuildInventory:
      opt.safety_stock = 3.0;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::DrainInventory:
      opt.safety_stock = 0.3;
      a = plan_flows(net, obs, opt);
      break;
    case TemplateKind::HaltExposed:
      a = plan_flows(net, obs, opt);
      a.halts = shock_exposed_ids(net, obs.shocks);
      break;
    case TemplateKind::HaltAll:
      a.order.assign(net.edge_count(), 0.0);
      a.ship.assign(net.edge_count(), 0.0);
      a.external_buy.assign(net.node_count(), 0.0);
      for (const auto& n : net.nodes()) a.halts.insert(n.id);
      break;
    case TemplateKind::SetExportParams: {
      a = plan_flows(net, obs, opt);
      const Constraints c = constraints_for(net, obs.shocks);
      ExportParams params;
      for (EdgeIndex e = 0; e < net.edge_count(); ++e) {
        if (std::isfinite(c.edge_cap[e])) {
          params.hold_nodes.insert(net.edge(e).from);
          params.hold_nodes.insert(net.edge(e).to);
        }
      }
      for (const auto& id : params.hold_nodes) {
        const auto i = net.index_of(id);
        a.external_buy[i] *= 1.5;
        for (const auto& p : net.predecessors(i)) a.order[p.edge] *= 1.5;
      }
      a.ship = a.order;
      a.export_params = std::move(params);
      break;
    }
    case TemplateKind::Surge:
      opt.avoid_banned = opt.avoid_sanctioned = false;
      opt.respect_caps = false;
      opt.demand_mult = 1.5;
      a = plan_flows(net, obs, opt);
      break;
  }
  a.template_name = to_string(kind);
  return a;
}

// --- Policy -----------------------------------------------------------------------

enum class ActorBackend { Scripted, Parametric, Llm };

inline std::string to_string(ActorBackend b) {
  switch (b) {
    case ActorBackend::Scripted: return "scripted";
    case ActorBackend::Parametric: return "parametric";
    case ActorBackend::Llm: return "llm";
  }
  return "parametric";
}

// Scripted rules: always one template, or halt everything while any shock is active.
enum class ScriptedRule { Fixed, HaltOnShock };

struct Policy {
  ActorBackend backend = ActorBackend::Parametric;
  std::shared_ptr<const SupplyNetwork> net;
  std::vector<TemplateKind> library;
  Eigen::MatrixXd theta;  // |library| x dim(phi)
  double temperature = 1.0;
  ScriptedRule rule = ScriptedRule::Fixed;
  TemplateKind fixed = TemplateKind::Reroute;
  std::shared_ptr<LlmClient> llm;

  bool trainable() const { return backend == ActorBackend::Parametric; }
};

inline Policy make_parametric_policy(std::shared_ptr<const SupplyNetwork> net,
                                     std::vector<TemplateKind> library = all_templates(), double temperature = 1.0) {
  Policy p;
  p.backend = ActorBackend::Parametric;
  p.theta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(library.size()),
                                  static_cast<Eigen::Index>(context_feature_dim(*net)));
  p.net = std::move(net);
  p.library = std::move(library);
  p.temperature = temperature;
  return p;
}

inline Policy make_scripted_policy(std::shared_ptr<const SupplyNetwork> net, ScriptedRule rule,
                                   TemplateKind fixed = TemplateKind::Reroute) {
  Policy p;
  p.backend = ActorBackend::Scripted;
  p.net = std::move(net);
  p.rule = rule;
  p.fixed = fixed;
  p.library = rule == ScriptedRule::Fixed ? std::vector<TemplateKind>{fixed}
                                          : std::vector<TemplateKind>{TemplateKind::HaltAll, fixed};
  return p;
}

inline std::size_t library_index(const Policy& policy, const std::string& template_name) {
  for (std::size_t k = 0; k < policy.library.size(); ++k)
    if (to_string(policy.library[k]) == template_name) return k;
  throw Error(ErrorCode::UnknownTemplate, "template '" + template_name + "' is not in the policy library");
}

// log softmax(theta * phi / T).
inline Eigen::VectorXd template_log_probs(const Policy& policy, const std::vector<double>& phi, double temperature) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::ParamOutOfRange, "temperature must be > 0");
  if (static_cast<Eigen::Index>(phi.size()) != policy.theta.cols())
    throw Error(ErrorCode::DimensionMismatch, "context features do not match theta");
  const Eigen::Map<const Eigen::VectorXd> x(phi.data(), static_cast<Eigen::Index>(phi.size()));
  const Eigen::VectorXd logits = policy.theta * x / temperature;
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

struct Candidate {
  Intervention action;
  double logprob = 0.0;
};

inline TemplateKind scripted_choice(const Policy& policy, const PromptContext& ctx) {
  if (policy.rule == ScriptedRule::HaltOnShock && !ctx.observation.shocks.empty()) return TemplateKind::HaltAll;
  return policy.fixed;
}

inline std::vector<ChatMessage> actor_messages(const SupplyNetwork& net, const PromptContext& ctx,
                                               const std::vector<TemplateKind>& library) {
  std::ostringstream menu;
  menu << "Choose one intervention template. Options:\n";
  for (auto k : library) menu << "  " << to_string(k) << ": " << template_description(k) << "\n";
  menu << "Explain briefly, then end with a line `TEMPLATE: <name>`.";
  return {{"system", "You are a supply-chain resilience planner."}, {"user", to_prompt(net, ctx) + "\n" + menu.str()}};
}

// n candidates from pi(.|ctx; T), each with its exact log-probability.
inline std::vector<Candidate> sample_candidates(const Policy& policy, const PromptContext& ctx, int n,
                                                double temperature, Rng& rng) {
  if (n < 1) throw Error(ErrorCode::ParamOutOfRange, "need at least one candidate");
  if (!(temperature > 0.0)) throw Error(ErrorCode::ParamOutOfRange, "temperature must be > 0");
  if (policy.library.empty()) throw Error(ErrorCode::EmptyTemplateLibrary, "policy has no templates");
  const auto& net = *policy.net;
  std::vector<Candidate> out;
  out.reserve(static_cast<std::size_t>(n));

  switch (policy.backend) {
    case ActorBackend::Scripted: {
      const TemplateKind k = scripted_choice(policy, ctx);
      for (int i = 0; i < n; ++i) {
        Candidate c{instantiate(net, k, ctx), 0.0};
        c.action.template_id = static_cast<int>(library_index(policy, to_string(k)));
        out.push_back(std::move(c));
      }
      break;
    }
    case ActorBackend::Parametric: {
      const auto logp = template_log_probs(policy, context_features(net, ctx), temperature);
      std::uniform_real_distribution<double> uni(0.0, 1.0);
      for (int i = 0; i < n; ++i) {
        const double u = uni(rng);
        double cum = 0.0;
        Eigen::Index pick = logp.size() - 1;
        for (Eigen::Index k = 0; k < logp.size(); ++k) {
          cum += std::exp(logp(k));
          if (u < cum) {
            pick = k;
            break;
          }
        }
        // Guard against rounding: never return a zero-probability template.
        while (std::exp(logp(pick)) == 0.0 && pick > 0) --pick;
        Candidate c{instantiate(net, policy.library[static_cast<std::size_t>(pick)], ctx), logp(pick)};
        c.action.template_id = static_cast<int>(pick);
        out.push_back(std::move(c));
      }
      break;
    }
    case ActorBackend::Llm: {
      if (!policy.llm) throw Error(ErrorCode::AdapterUnavailable, "LLM actor has no client");
      const auto completions = policy.llm->complete(actor_messages(net, ctx, policy.library), temperature, n);
      for (int i = 0; i < n; ++i) {
        const auto& text = completions[static_cast<std::size_t>(i) % completions.size()];
        const auto name = parse_template_name(text);
        auto kind = name ? template_from_string(*name) : std::nullopt;
        if (!kind || std::find(policy.library.begin(), policy.library.end(), *kind) == policy.library.end())
          kind = TemplateKind::Hold;
        Candidate c{instantiate(net, *kind, ctx), 0.0};
        c.action.template_id = static_cast<int>(library_index(policy, to_string(*kind)));
        c.action.free_text = text;
        out.push_back(std::move(c));
      }
      break;
    }
  }
  return out;
}

inline double log_prob(const Policy& policy, const PromptContext& ctx, const Intervention& action,
                       std::optional<double> temperature = std::nullopt) {
  const auto idx = library_index(policy, action.template_name);
  if (policy.backend != ActorBackend::Parametric) return 0.0;
  const auto logp = template_log_probs(policy, context_features(*policy.net, ctx), temperature.value_or(policy.temperature));
  return logp(static_cast<Eigen::Index>(idx));
}

// --- Critics --------------------------------------------------------------------

struct CriticVerdict {
  std::string feedback;
  double score = 50.0;  // [0, 100]
};

enum class CriticBackend { Scripted, Llm };

inline std::string to_string(CriticBackend b) { return b == CriticBackend::Scripted ? "scripted" : "llm"; }

struct CriticPenalties {
  double sanctioned_trade = 60.0;
  double banned_quantity = 15.0;
  double over_capacity = 10.0;
  double unjustified_halt = 20.0;
};

struct Critic {
  CriticBackend backend = CriticBackend::Scripted;
  std::shared_ptr<const SupplyNetwork> net;
  CriticPenalties penalties;
  double violation_weight = 5.0;  // external score points per violating node
  double retro_discount = 0.9;
  double cascade_weight = 1.5;    // retrospective points per point of attributable risk growth
  std::shared_ptr<LlmClient> llm;
};

inline double clamp_score(double s) { return std::clamp(s, 0.0, 100.0); }

inline std::vector<ChatMessage> critic_messages(const std::string& role, const std::string& body) {
  return {{"system", role + " Reply with a short assessment and end with a line `SCORE: <0-100>`."}, {"user", body}};
}

inline CriticVerdict llm_verdict(const Critic& critic, const std::string& role, const std::string& body) {
  if (!critic.llm) throw Error(ErrorCode::AdapterUnavailable, "LLM critic has no client");
  CriticVerdict v;
  v.score = clamp_score(critic.llm->complete_score(critic_messages(role, body), &v.feedback));
  return v;
}

// Pre-execution semantic review. Scripted backend: 100 minus rule penalties
// for planned trades with sanctioned entities, quantities above a ban cap or
// capacity, and halts of entities no active shock touches.
inline CriticVerdict internal_critique(const Critic& critic, const Observation& obs, const Intervention& action,
                                      const PromptContext& ctx) {
  const auto& net = *critic.net;
  if (critic.backend == CriticBackend::Llm)
    return llm_verdict(critic, "You review proposed supply-chain interventions for compliance and feasibility.",
                       to_prompt(net, ctx) + "\nProposed action: " + describe_action(net, action));

  const Constraints c = constraints_for(net, obs.shocks);
  auto planned = [&](EdgeIndex e) {
    const double o = action.order.empty() ? 0.0 : action.order[e];
    const double s = action.ship.empty() ? 0.0 : action.ship[e];
    return std::min(o, s);
  };
  std::set<std::string> exposed = shock_exposed_ids(net, obs.shocks);
  bool sanctioned = false, banned = false, over_cap = false, bad_halt = false;
  for (EdgeIndex e = 0; e < net.edge_count(); ++e) {
    const NodeIndex s = net.edge_source(e), d = net.edge_target(e);
    if (action.halts.count(net.node(s).id) || action.halts.count(net.node(d).id)) continue;
    const double q = planned(e);
    if (q > 0.0 && (c.sanctioned[s] || c.sanctioned[d])) sanctioned = true;
    if (q > c.edge_cap[e] + 1e-9) banned = true;
  }
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const double cap = estimated_capacity(net, obs, c, i, false);
    double out = 0.0;
    for (const auto& s : net.successors(i)) out += planned(s.edge);
    const double ext = action.external_buy.empty() ? 0.0 : action.external_buy[i];
    if (out > cap * (1.0 + 1e-9) || ext > 2.0 * cap * (1.0 + 1e-9)) over_cap = true;
  }
  for (const auto& h : action.halts)
    if (!exposed.count(h)) bad_halt = true;

  double score = 100.0;
  std::ostringstream fb;
  if (sanctioned) {
    score -= critic.penalties.sanctioned_trade;
    fb << "plans trade with a sanctioned entity; ";
  }
  if (banned) {
    score -= critic.penalties.banned_quantity;
    fb << "exceeds an export-ban cap; ";
  }
  if (over_cap) {
    score -= critic.penalties.over_capacity;
    fb << "exceeds capacity; ";
  }
  if (bad_halt) {
    score -= critic.penalties.unjustified_halt;
    fb << "halts entities without cause; ";
  }
  CriticVerdict v;
  v.score = clamp_score(score);
  v.feedback = fb.str().empty() ? "no rule violations found" : fb.str();
  return v;
}

// Immediate post-execution assessment: 50 * (1 + r_exec) - weight * violating nodes.
inline CriticVerdict external_assess(const Critic& critic, const Observation& obs, const Intervention& action,
                                     const ExecFeedback& feedback) {
  if (critic.backend == CriticBackend::Llm) {
    std::ostringstream body;
    body << "Step " << feedback.step << " action: " << describe_action(*critic.net, action) << "\nRealized reward "
         << feedback.reward << ", violations " << feedback.violations << ", clipped " << feedback.clipped_total
         << ", operability " << feedback.operability << ", observation step " << obs.step << ".";
    return llm_verdict(critic, "You assess the immediate outcome of an executed supply-chain action.", body.str());
  }
  CriticVerdict v;
  v.score = clamp_score(50.0 * (1.0 + feedback.reward) - critic.violation_weight * feedback.violations);
  std::ostringstream fb;
  fb << "r_exec=" << feedback.reward << ", violations=" << feedback.violations;
  v.feedback = fb.str();
  return v;
}

// Nodes whose risk can be blamed on record `rec`: its violators and everything downstream.
inline std::vector<NodeIndex> attributable_nodes(const SupplyNetwork& net, const StepRecord& rec) {
  std::vector<bool> mark(net.node_count(), false);
  std::vector<NodeIndex> stack;
  for (NodeIndex i = 0; i < net.node_count(); ++i)
    if (i < rec.feedback.violation.size() && rec.feedback.violation[i]) {
      mark[i] = true;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    for (const auto& s : net.successors(i))
      if (!mark[s.node]) {
        mark[s.node] = true;
        stack.push_back(s.node);
      }
  }
  std::vector<NodeIndex> out;
  for (NodeIndex i = 0; i < net.node_count(); ++i)
    if (mark[i]) out.push_back(i);
  return out;
}

// Hindsight re-evaluation of buffered record `index` once the window is complete.
// Scripted backend: the record's forward slice of the window is scored by its
// normalized discounted return, minus a cascade penalty for risk growth on the
// nodes its violations can reach.
inline CriticVerdict retrospective_score(const Critic& critic, const HindsightBuffer& buffer, std::size_t index,
                                         const Observation& final_obs) {
  const StepRecord& rec = buffer.at(index);
  const auto& net = *critic.net;
  const auto& records = buffer.records();
  if (critic.backend == CriticBackend::Llm) {
    std::ostringstream body;
    body << "Window of " << records.size() << " executed steps:\n";
    for (const auto& r : records)
      body << "  step " << r.step << ": " << describe_action(net, r.action) << " -> reward " << r.feedback.reward
           << ", violations " << r.feedback.violations << ", immediate score " << r.external_score << "\n";
    body << "Now at step " << final_obs.step << ". Re-evaluate the action taken at step " << rec.step
         << " with full hindsight of its consequences.";
    return llm_verdict(critic, "You re-evaluate past supply-chain decisions with hindsight.", body.str());
  }

  double ret = 0.0, norm = 0.0, w = 1.0;
  for (std::size_t h = index; h < records.size(); ++h) {
    ret += w * records[h].feedback.reward;
    norm += w;
    w *= critic.retro_discount;
  }
  const double g = ret / norm;

  double growth = 0.0;
  const auto blamed = attributable_nodes(net, rec);
  if (!blamed.empty()) {
    const auto& end_states = records.back().feedback.states_after;
    double before = 0.0, after = 0.0;
    for (auto i : blamed) {
      before += rec.feedback.risk_before[i];
      after += end_states[i].risk;
    }
    growth = std::max(0.0, (after - before) / static_cast<double>(blamed.size()));
  }
  CriticVerdict v;
  v.score = clamp_score(50.0 * (1.0 + g) - critic.cascade_weight * growth);
  std::ostringstream fb;
  fb << "window return " << g << ", attributable risk growth " << growth;
  v.feedback = fb.str();
  return v;
}

}  // namespace reflplan
