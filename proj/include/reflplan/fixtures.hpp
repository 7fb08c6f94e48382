#pragma once
//
// Scripted scenarios with known outcomes.
//
// Export-ban backpressure: lithography tools may not leave the equipment
// maker and warehouses are tight. Holding exports while stockpiling piles up
// inventory behind the ban, so its rollout reward is negative while
// compliant alternatives stay non-negative.
//
// Hindsight reversal: an action that trades through a sanction collects rent
// and scores well immediately, then draws enforcement one step later. Scored
// over a K-step window its verdict flips.
//

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "agent.hpp"
#include "config.hpp"
#include "dynamics.hpp"
#include "hindsight.hpp"
#include "rng.hpp"
#include "world_model.hpp"

namespace reflplan {

struct HindsightFixture {
  std::string name = "hindsight-reversal";
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> actions;  // one template per step; the window is actions.size() long
  std::size_t probe = 0;             // record whose verdicts are compared
};

inline HindsightFixture builtin_hindsight_fixture() {
  HindsightFixture fx;
  auto& c = fx.config;
  c.name = "hindsight-reversal";
  c.shocks = {{ShockKind::Sanction, {"foundry-b"}, 1.0, 1, 30,
               "The offshore foundry is placed on an entity list from the first step."}};
  c.dynamics.t_max = 6;
  c.dynamics.enforcement_lag = 1;
  c.dynamics.enforcement_risk = 60.0;
  c.dynamics.reward.cash_scale = 200.0;
  c.buffer_k = 3;
  fx.seed = 7;
  fx.actions = {"ignore_shocks", "halt_all", "halt_all"};
  fx.probe = 0;
  return fx;
}

inline nlohmann::json hindsight_fixture_to_json(const HindsightFixture& fx) {
  return {{"name", fx.name}, {"seed", fx.seed}, {"actions", fx.actions}, {"probe", fx.probe},
          {"config", config_to_json(fx.config)}};
}

inline HindsightFixture hindsight_fixture_from_json(const nlohmann::json& j) {
  HindsightFixture fx;
  try {
    fx.name = j.value("name", fx.name);
    fx.seed = j.at("seed").get<std::uint64_t>();
    fx.actions = j.at("actions").get<std::vector<std::string>>();
    fx.probe = j.value("probe", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("fixture: ") + e.what());
  }
  fx.config = config_from_json(j.at("config"));
  if (fx.actions.empty() || fx.probe >= fx.actions.size())
    throw Error(ErrorCode::InvalidConfig, "fixture needs actions and a probe index inside them");
  return fx;
}

struct ScenarioFixture {
  std::string name;
  ExperimentConfig config;
  std::uint64_t seed = 0;
};

inline ScenarioFixture builtin_export_ban_fixture() {
  ScenarioFixture fx;
  fx.name = "export-ban-backpressure";
  auto& c = fx.config;
  c.name = fx.name;
  c.shocks = {{ShockKind::ExportBan, {"equipment"}, 0.0, 1, 30,
               "Export controls stop all lithography tool shipments from the equipment maker."}};
  c.dynamics.overstock_factor = 1.0;
  c.dynamics.overstock_risk = 50.0;
  fx.seed = 1;
  return fx;
}

inline nlohmann::json scenario_fixture_to_json(const ScenarioFixture& fx) {
  return {{"name", fx.name}, {"seed", fx.seed}, {"config", config_to_json(fx.config)}};
}

inline ScenarioFixture scenario_fixture_from_json(const nlohmann::json& j) {
  ScenarioFixture fx;
  try {
    fx.name = j.at("name").get<std::string>();
    fx.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("fixture: ") + e.what());
  }
  fx.config = config_from_json(j.at("config"));
  return fx;
}

// Oracle r_wm of each template at the first decision of the scenario.
inline std::vector<std::pair<TemplateKind, double>> first_step_predictions(const ScenarioFixture& fx,
                                                                           const std::vector<TemplateKind>& kinds) {
  auto net = std::make_shared<const SupplyNetwork>(build_network(fx.config.network));
  EnvState env = make_env(net, fx.config.shocks, fx.config.dynamics, fx.seed, fx.config.feature_mean);
  Rng rng = make_rng(fx.seed, {stream::kObservation});
  const Observation obs = observe(env, rng);
  const auto ctx = make_context(obs, std::nullopt, {});
  const WorldModel wm{WorldModelMode::Oracle, fx.config.horizon, fx.config.discount, std::nullopt};
  std::vector<std::pair<TemplateKind, double>> out;
  for (std::size_t k = 0; k < kinds.size(); ++k)
    out.emplace_back(kinds[k], wm.predict(env, obs, instantiate(*net, kinds[k], ctx),
                                          make_rng(fx.seed, {stream::kRollout, 1, k})));
  return out;
}

struct HindsightVerdicts {
  CriticVerdict external;
  CriticVerdict retrospective;
  std::vector<double> rewards;
};

// Executes the scripted actions with scripted critics and scores the probe record.
inline HindsightVerdicts evaluate_hindsight_fixture(const HindsightFixture& fx) {
  auto net = std::make_shared<const SupplyNetwork>(build_network(fx.config.network));
  Critic critic;
  critic.net = net;
  critic.penalties = fx.config.penalties;
  EnvState env = make_env(net, fx.config.shocks, fx.config.dynamics, fx.seed, fx.config.feature_mean);
  Rng rng = make_rng(fx.seed, {stream::kObservation});
  Observation obs = observe(env, rng);
  HindsightBuffer buffer(fx.actions.size());
  std::optional<Intervention> previous;
  HindsightVerdicts out;
  std::vector<CriticVerdict> immediate;
  for (const auto& name : fx.actions) {
    const auto kind = template_from_string(name);
    if (!kind) throw Error(ErrorCode::UnknownTemplate, "fixture action '" + name + "'");
    const auto ctx = make_context(obs, previous, {});
    const Intervention a = instantiate(*net, *kind, ctx);
    auto res = env_step(env, a, rng);
    immediate.push_back(external_assess(critic, obs, a, res.feedback));
    StepRecord rec;
    rec.step = res.feedback.step;
    rec.observation = obs;
    rec.action = a;
    rec.external_score = immediate.back().score;
    rec.feedback = res.feedback;
    out.rewards.push_back(res.feedback.reward);
    buffer.push(std::move(rec));
    previous = a;
    obs = std::move(res.observation);
    if (env.terminal) break;
  }
  if (fx.probe >= buffer.size()) throw Error(ErrorCode::IndexOutOfBuffer, "episode ended before the probe step");
  out.external = immediate[fx.probe];
  out.retrospective = retrospective_score(critic, buffer, fx.probe, obs);
  return out;
}

}  // namespace reflplan
