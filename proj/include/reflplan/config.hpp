#pragma once
//
// Experiment configuration: topology and shock schedule references, backend
// selections, loop hyperparameters, ablation flags and baseline selector.
//
// `topology` and `shocks` accept a built-in name ("semisim-v1", "default",
// "none"), a path to a JSON file, or an inline JSON object/array. Resolution
// replaces references by their inline content so a snapshot is self-contained.
//

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agent.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "llm_adapter.hpp"
#include "supply_graph.hpp"
#include "world_model.hpp"

namespace reflplan {

enum class Baseline { Planner, HaltLlmStandin, Random, StaticHold };

inline std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::Planner: return "planner";
    case Baseline::HaltLlmStandin: return "halt_llm_standin";
    case Baseline::Random: return "random";
    case Baseline::StaticHold: return "static_hold";
  }
  return "planner";
}

inline Baseline baseline_from_string(const std::string& s) {
  for (auto b : {Baseline::Planner, Baseline::HaltLlmStandin, Baseline::Random, Baseline::StaticHold})
    if (to_string(b) == s) return b;
  throw Error(ErrorCode::InvalidConfig, "unknown baseline '" + s + "'");
}

struct AblationFlags {
  bool no_world_model = false;
  bool no_retro_rl = false;
  bool no_internal_reflection = false;
  bool operator==(const AblationFlags&) const = default;
};

inline void set_ablation(AblationFlags& f, const std::string& name) {
  if (name == "no_world_model") f.no_world_model = true;
  else if (name == "no_retro_rl") f.no_retro_rl = true;
  else if (name == "no_internal_reflection") f.no_internal_reflection = true;
  else if (name != "none" && name != "full") throw Error(ErrorCode::InvalidConfig, "unknown ablation '" + name + "'");
}

struct ExperimentConfig {
  std::string name = "semisim-v1";
  NetworkSpec network = semisim_v1_spec();
  std::vector<Shock> shocks = default_shock_schedule();
  DynamicsParams dynamics;
  double feature_mean = kDefaultFeatureMean;

  ActorBackend actor = ActorBackend::Parametric;
  CriticBackend critic = CriticBackend::Scripted;
  WorldModelMode wm_mode = WorldModelMode::Oracle;
  CriticPenalties penalties;

  double alpha = 0.3;
  double beta = 0.7;
  int n_candidates = 3;
  int buffer_k = 3;
  double temperature = 1.0;
  int horizon = 3;
  double discount = 0.9;
  double learning_rate = 0.05;
  int history_length = 3;

  int episodes = 1;
  std::uint64_t seed = 0;
  int workers = 1;
  bool carry_policy = false;  // one policy updated across episodes (run sequentially)

  // Learned world model.
  int latent_dim = 16;
  int warmup_episodes = 4;
  double wm_lambda = 1e-3;

  AblationFlags ablation;
  Baseline baseline = Baseline::Planner;

  std::optional<LlmConfig> llm;
};

// Named built-ins.
inline NetworkSpec builtin_network(const std::string& name) {
  if (name == "semisim-v1") return semisim_v1_spec();
  throw Error(ErrorCode::InvalidConfig, "unknown topology '" + name + "'");
}

inline std::optional<std::vector<Shock>> builtin_shocks(const std::string& name) {
  if (name == "default" || name == "semisim-v1") return default_shock_schedule();
  if (name == "none") return std::vector<Shock>{};
  return std::nullopt;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, what + ": " + e.what());
  }
}

// Resolves a relative path against `base_dir`.
inline std::filesystem::path resolve_path(const std::string& ref, const std::filesystem::path& base_dir) {
  std::filesystem::path p(ref);
  if (p.is_relative() && !base_dir.empty() && !std::filesystem::exists(p)) p = base_dir / p;
  return p;
}

inline NetworkSpec resolve_network(const nlohmann::json& ref, const std::filesystem::path& base_dir) {
  if (ref.is_object()) {
    try {
      return ref.get<NetworkSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, std::string("topology: ") + e.what());
    }
  }
  if (!ref.is_string()) throw Error(ErrorCode::InvalidConfig, "topology must be a name, path or object");
  const auto s = ref.get<std::string>();
  if (s == "semisim-v1") return semisim_v1_spec();
  const auto path = resolve_path(s, base_dir);
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::InvalidConfig, "unknown topology '" + s + "'");
  return parse_network_spec(read_text_file(path));
}

inline std::vector<Shock> resolve_shocks(const nlohmann::json& ref, const std::filesystem::path& base_dir) {
  if (ref.is_array()) return parse_shock_schedule(ref.dump());
  if (!ref.is_string()) throw Error(ErrorCode::InvalidConfig, "shocks must be a name, path or array");
  const auto s = ref.get<std::string>();
  if (auto b = builtin_shocks(s)) return *b;
  const auto path = resolve_path(s, base_dir);
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::InvalidConfig, "unknown shock schedule '" + s + "'");
  return parse_shock_schedule(read_text_file(path));
}

inline ActorBackend actor_from_string(const std::string& s) {
  for (auto b : {ActorBackend::Scripted, ActorBackend::Parametric, ActorBackend::Llm})
    if (to_string(b) == s) return b;
  throw Error(ErrorCode::InvalidConfig, "unknown actor backend '" + s + "'");
}

inline CriticBackend critic_from_string(const std::string& s) {
  if (s == "scripted") return CriticBackend::Scripted;
  if (s == "llm") return CriticBackend::Llm;
  throw Error(ErrorCode::InvalidConfig, "unknown critic backend '" + s + "'");
}

// Invariants: N, K, T_max >= 1; T > 0; alpha, beta >= 0; LLM backends need an endpoint.
inline void validate_config(const ExperimentConfig& c) {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (c.n_candidates < 1) bad("N must be >= 1");
  if (c.buffer_k < 1) bad("K must be >= 1");
  if (c.dynamics.t_max < 1) bad("t_max must be >= 1");
  if (!(c.temperature > 0.0)) bad("temperature must be > 0");
  if (!(c.alpha >= 0.0) || !(c.beta >= 0.0)) bad("alpha and beta must be >= 0");
  if (c.horizon < 1) bad("horizon must be >= 1");
  if (!(c.discount >= 0.0 && c.discount <= 1.0)) bad("discount must lie in [0,1]");
  if (!(c.learning_rate >= 0.0)) bad("learning_rate must be >= 0");
  if (c.episodes < 1) bad("episodes must be >= 1");
  if (c.workers < 1) bad("workers must be >= 1");
  if (c.history_length < 0) bad("history_length must be >= 0");
  if (c.latent_dim < 1) bad("latent_dim must be >= 1");
  if (c.warmup_episodes < 1) bad("warmup_episodes must be >= 1");
  if ((c.actor == ActorBackend::Llm || c.critic == CriticBackend::Llm) && (!c.llm || c.llm->endpoint.empty()))
    bad("LLM backends need llm.endpoint");
  try {
    const auto net = build_network(c.network);
    validate_schedule(net, c.shocks);
  } catch (const Error& e) {
    bad(std::string("network/shocks: ") + e.what());
  }
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["topology"] = c.network;
  j["shocks"] = c.shocks;
  j["dynamics"] = c.dynamics;
  j["feature_mean"] = c.feature_mean;
  j["actor"] = to_string(c.actor);
  j["critic"] = to_string(c.critic);
  j["wm_mode"] = to_string(c.wm_mode);
  j["critic_penalties"] = {{"sanctioned_trade", c.penalties.sanctioned_trade},
                           {"banned_quantity", c.penalties.banned_quantity},
                           {"over_capacity", c.penalties.over_capacity},
                           {"unjustified_halt", c.penalties.unjustified_halt}};
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["N"] = c.n_candidates;
  j["K"] = c.buffer_k;
  j["temperature"] = c.temperature;
  j["horizon"] = c.horizon;
  j["discount"] = c.discount;
  j["learning_rate"] = c.learning_rate;
  j["history_length"] = c.history_length;
  j["episodes"] = c.episodes;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["carry_policy"] = c.carry_policy;
  j["latent_dim"] = c.latent_dim;
  j["warmup_episodes"] = c.warmup_episodes;
  j["wm_lambda"] = c.wm_lambda;
  j["ablation"] = {{"no_world_model", c.ablation.no_world_model},
                   {"no_retro_rl", c.ablation.no_retro_rl},
                   {"no_internal_reflection", c.ablation.no_internal_reflection}};
  j["baseline"] = to_string(c.baseline);
  if (c.llm) j["llm"] = *c.llm;
  return j;
}

// Missing keys keep their defaults. `base_dir` anchors relative file references.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
  ExperimentConfig c;
  try {
    c.name = j.value("name", c.name);
    if (j.contains("topology")) c.network = resolve_network(j.at("topology"), base_dir);
    if (j.contains("shocks")) c.shocks = resolve_shocks(j.at("shocks"), base_dir);
    if (j.contains("dynamics")) c.dynamics = j.at("dynamics").get<DynamicsParams>();
    c.feature_mean = j.value("feature_mean", c.feature_mean);
    if (j.contains("actor")) c.actor = actor_from_string(j.at("actor").get<std::string>());
    if (j.contains("critic")) c.critic = critic_from_string(j.at("critic").get<std::string>());
    if (j.contains("wm_mode")) c.wm_mode = wm_mode_from_string(j.at("wm_mode").get<std::string>());
    if (j.contains("critic_penalties")) {
      const auto& p = j.at("critic_penalties");
      c.penalties.sanctioned_trade = p.value("sanctioned_trade", c.penalties.sanctioned_trade);
      c.penalties.banned_quantity = p.value("banned_quantity", c.penalties.banned_quantity);
      c.penalties.over_capacity = p.value("over_capacity", c.penalties.over_capacity);
      c.penalties.unjustified_halt = p.value("unjustified_halt", c.penalties.unjustified_halt);
    }
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.n_candidates = j.value("N", c.n_candidates);
    c.buffer_k = j.value("K", c.buffer_k);
    c.temperature = j.value("temperature", c.temperature);
    c.horizon = j.value("horizon", c.horizon);
    c.discount = j.value("discount", c.discount);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.history_length = j.value("history_length", c.history_length);
    c.episodes = j.value("episodes", c.episodes);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.carry_policy = j.value("carry_policy", c.carry_policy);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.warmup_episodes = j.value("warmup_episodes", c.warmup_episodes);
    c.wm_lambda = j.value("wm_lambda", c.wm_lambda);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      if (a.is_array()) {
        for (const auto& name : a) set_ablation(c.ablation, name.get<std::string>());
      } else {
        c.ablation.no_world_model = a.value("no_world_model", false);
        c.ablation.no_retro_rl = a.value("no_retro_rl", false);
        c.ablation.no_internal_reflection = a.value("no_internal_reflection", false);
      }
    }
    if (j.contains("baseline")) c.baseline = baseline_from_string(j.at("baseline").get<std::string>());
    if (j.contains("llm")) c.llm = j.at("llm").get<LlmConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  validate_config(c);
  return c;
}

// `ref` is "semisim-v1" (the default experiment) or a path to a config file.
inline ExperimentConfig load_config(const std::string& ref) {
  if (ref == "semisim-v1" || ref.empty()) return ExperimentConfig{};
  const std::filesystem::path path(ref);
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::InvalidConfig, "no such config '" + ref + "'");
  return config_from_json(parse_json_text(read_text_file(path), ref), path.parent_path());
}

}  // namespace reflplan
