#pragma once
//
// The reflective planning loop: sample N candidates, score each with the
// internal critic and the world model, pick argmax J, execute, assess,
// buffer; every K steps (or at termination) rescore the buffer in hindsight,
// turn scores into rewards and apply one accumulated REINFORCE step.
//

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "agent.hpp"
#include "config.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "hindsight.hpp"
#include "rng.hpp"
#include "supply_graph.hpp"
#include "world_model.hpp"

namespace reflplan {

// --- Selection and update primitives ------------------------------------------------

// Critic score in [0,100] mapped to [-1,1].
inline double normalize_reward(double s_retro) {
  if (!(s_retro >= 0.0 && s_retro <= 100.0))
    throw Error(ErrorCode::ScoreOutOfRange, "score " + std::to_string(s_retro) + " outside [0,100]");
  return 2.0 * (s_retro / 100.0) - 1.0;
}

inline double denormalize_reward(double r) { return (r + 1.0) * 50.0; }

inline double reinforce_loss(double r, double logprob) { return -r * logprob; }

struct Selection {
  std::size_t index = 0;
  std::vector<double> joint;
};

// J_k = alpha * (2 s_k/100 - 1) + beta * r_k; argmax with ties to the lowest index.
inline Selection select_action(std::size_t candidates, const std::vector<double>& s_llm,
                               const std::vector<double>& r_wm, double alpha, double beta) {
  if (candidates == 0 || s_llm.size() != candidates || r_wm.size() != candidates)
    throw Error(ErrorCode::LengthMismatch, "candidate, s_llm and r_wm lists must have equal non-zero length");
  if (!(alpha >= 0.0) || !(beta >= 0.0) || (alpha == 0.0 && beta == 0.0))
    throw Error(ErrorCode::DegenerateWeights, "alpha and beta must be >= 0 and not both 0");
  Selection sel;
  sel.joint.resize(candidates);
  for (std::size_t k = 0; k < candidates; ++k) {
    sel.joint[k] = alpha * (2.0 * s_llm[k] / 100.0 - 1.0) + beta * r_wm[k];
    if (sel.joint[k] > sel.joint[sel.index]) sel.index = k;
  }
  return sel;
}

struct UpdateItem {
  double r = 0.0;
  double logprob = 0.0;
  double loss = 0.0;
  std::vector<double> phi;
  std::size_t template_index = 0;
};

struct UpdateBatch {
  std::vector<UpdateItem> items;
  double learning_rate = 0.05;
  double temperature = 1.0;
};

struct PolicyUpdate {
  Policy policy;
  Eigen::MatrixXd gradient;  // sum over the batch of d loss / d theta
};

// Sum over the batch of -r * (1_a - pi) (x) phi / T, evaluated at the current theta.
inline Eigen::MatrixXd policy_gradient(const Policy& policy, const UpdateBatch& batch) {
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(policy.theta.rows(), policy.theta.cols());
  for (const auto& it : batch.items) {
    if (it.template_index >= policy.library.size())
      throw Error(ErrorCode::UnknownTemplate, "template index outside the library");
    const Eigen::VectorXd pi = template_log_probs(policy, it.phi, batch.temperature).array().exp();
    Eigen::VectorXd coeff = -pi;
    coeff(static_cast<Eigen::Index>(it.template_index)) += 1.0;
    const Eigen::Map<const Eigen::VectorXd> x(it.phi.data(), static_cast<Eigen::Index>(it.phi.size()));
    grad.noalias() += (-it.r / batch.temperature) * coeff * x.transpose();
  }
  return grad;
}

inline PolicyUpdate update_policy(const Policy& policy, const UpdateBatch& batch) {
  if (batch.items.empty()) throw Error(ErrorCode::EmptyBatch, "update batch is empty");
  if (!policy.trainable()) throw Error(ErrorCode::NonTrainableBackend, to_string(policy.backend) + " policy");
  PolicyUpdate out{policy, policy_gradient(policy, batch)};
  out.policy.theta -= batch.learning_rate * out.gradient;
  return out;
}

inline nlohmann::json policy_to_json(const Policy& p) {
  nlohmann::json lib = nlohmann::json::array();
  for (auto k : p.library) lib.push_back(to_string(k));
  return {{"backend", to_string(p.backend)}, {"temperature", p.temperature}, {"library", lib},
          {"theta", detail::matrix_to_json(p.theta)}};
}

// --- Episode log ----------------------------------------------------------------

struct CandidateLog {
  Intervention action;
  double logprob = 0.0;
  std::optional<double> s_llm;
  std::string internal_feedback;
  std::optional<double> r_wm;
  double joint = 0.0;
};

struct StepLog {
  int step = 0;
  Observation observation;
  std::vector<CandidateLog> candidates;
  std::size_t selected = 0;
  ExecFeedback feedback;
  double external_score = 0.0;
  std::string external_feedback;
  std::size_t buffer_size = 0;  // after pushing this step
};

struct RetroLog {
  int step = 0;
  double s_retro = 0.0;
  std::string feedback;
  double r = 0.0;
  double logprob = 0.0;
  double loss = 0.0;
};

// kind "update": retrospective scores plus one policy step; "flush": buffer
// emptied without a policy step (retrospective RL disabled or non-trainable actor).
struct UpdateEvent {
  int step = 0;
  std::string kind = "update";
  bool terminal = false;
  std::vector<RetroLog> records;
  double loss_sum = 0.0;
  double grad_norm = 0.0;
  double theta_norm = 0.0;
  std::size_t buffer_after = 0;
};

struct EpisodeLog {
  int episode = 0;
  std::uint64_t seed = 0;
  nlohmann::json settings;
  std::vector<NodeState> initial_states;
  std::optional<double> p_base;
  std::vector<StepLog> steps;
  std::vector<UpdateEvent> updates;
  std::vector<LlmExchange> llm;
  int rollout_calls = 0;
  int critic_calls = 0;
  bool terminal = false;
  bool collapsed = false;
  std::optional<std::string> error;
};

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

inline nlohmann::json step_to_json(const StepLog& s) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : s.candidates)
    cands.push_back({{"action", c.action},
                     {"logprob", c.logprob},
                     {"s_llm", opt_json(c.s_llm)},
                     {"f_internal", c.internal_feedback},
                     {"r_wm", opt_json(c.r_wm)},
                     {"J", c.joint}});
  return {{"type", "step"},        {"step", s.step},
          {"observation", s.observation}, {"candidates", cands},
          {"selected", s.selected}, {"feedback", s.feedback},
          {"f_e", s.external_score}, {"f_e_text", s.external_feedback},
          {"buffer_size", s.buffer_size}};
}

inline StepLog step_from_json(const nlohmann::json& j) {
  StepLog s;
  s.step = j.at("step").get<int>();
  s.observation = j.at("observation").get<Observation>();
  for (const auto& c : j.at("candidates")) {
    CandidateLog cl;
    cl.action = c.at("action").get<Intervention>();
    cl.logprob = c.at("logprob").get<double>();
    cl.s_llm = opt_double(c, "s_llm");
    cl.internal_feedback = c.value("f_internal", std::string{});
    cl.r_wm = opt_double(c, "r_wm");
    cl.joint = c.at("J").get<double>();
    s.candidates.push_back(std::move(cl));
  }
  s.selected = j.at("selected").get<std::size_t>();
  if (s.selected >= s.candidates.size()) throw Error(ErrorCode::CorruptLog, "selected index out of range");
  s.feedback = j.at("feedback").get<ExecFeedback>();
  s.external_score = j.at("f_e").get<double>();
  s.external_feedback = j.value("f_e_text", std::string{});
  s.buffer_size = j.at("buffer_size").get<std::size_t>();
  return s;
}

inline nlohmann::json update_to_json(const UpdateEvent& u) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : u.records)
    recs.push_back({{"step", r.step},
                    {"s_retro", r.s_retro},
                    {"f_retro", r.feedback},
                    {"r", r.r},
                    {"logprob", r.logprob},
                    {"loss", r.loss}});
  return {{"type", u.kind},          {"step", u.step},
          {"terminal", u.terminal},  {"records", recs},
          {"loss_sum", u.loss_sum},  {"grad_norm", u.grad_norm},
          {"theta_norm", u.theta_norm}, {"buffer_after", u.buffer_after}};
}

inline UpdateEvent update_from_json(const nlohmann::json& j) {
  UpdateEvent u;
  u.kind = j.at("type").get<std::string>();
  u.step = j.at("step").get<int>();
  u.terminal = j.at("terminal").get<bool>();
  for (const auto& r : j.at("records"))
    u.records.push_back({r.at("step").get<int>(), r.at("s_retro").get<double>(), r.value("f_retro", std::string{}),
                         r.at("r").get<double>(), r.at("logprob").get<double>(), r.at("loss").get<double>()});
  u.loss_sum = j.at("loss_sum").get<double>();
  u.grad_norm = j.at("grad_norm").get<double>();
  u.theta_norm = j.at("theta_norm").get<double>();
  u.buffer_after = j.at("buffer_after").get<std::size_t>();
  return u;
}

// JSONL: header, then steps with their update/flush events in order of
// occurrence, LLM exchanges, and an end record.
inline std::string episode_log_to_jsonl(const EpisodeLog& log) {
  std::ostringstream os;
  nlohmann::json header = {{"type", "header"},
                           {"episode", log.episode},
                           {"seed", log.seed},
                           {"settings", log.settings},
                           {"initial_states", log.initial_states},
                           {"p_base", opt_json(log.p_base)}};
  os << header.dump() << "\n";
  std::size_t u = 0;
  for (const auto& s : log.steps) {
    os << step_to_json(s).dump() << "\n";
    while (u < log.updates.size() && log.updates[u].step == s.step) os << update_to_json(log.updates[u++]).dump() << "\n";
  }
  for (; u < log.updates.size(); ++u) os << update_to_json(log.updates[u]).dump() << "\n";
  for (const auto& ex : log.llm)
    os << nlohmann::json{{"type", "llm"}, {"request", ex.request}, {"response", ex.response}, {"status", ex.status}}.dump()
       << "\n";
  nlohmann::json end = {{"type", "end"},
                        {"terminal", log.terminal},
                        {"collapsed", log.collapsed},
                        {"rollout_calls", log.rollout_calls},
                        {"critic_calls", log.critic_calls}};
  if (log.error) end["error"] = *log.error;
  os << end.dump() << "\n";
  return os.str();
}

// Throws CorruptLog naming the 1-based line on malformed or truncated input.
inline EpisodeLog episode_log_from_jsonl(const std::string& text) {
  EpisodeLog log;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_header = false, have_end = false;
  auto corrupt = [&](const std::string& why) {
    throw Error(ErrorCode::CorruptLog, "line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (have_end) corrupt("content after end record");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      corrupt("not valid JSON");
    }
    try {
      const auto type = j.at("type").get<std::string>();
      if (!have_header && type != "header") corrupt("first record must be the header");
      if (type == "header") {
        if (have_header) corrupt("duplicate header");
        have_header = true;
        log.episode = j.at("episode").get<int>();
        log.seed = j.at("seed").get<std::uint64_t>();
        log.settings = j.at("settings");
        log.initial_states = j.at("initial_states").get<std::vector<NodeState>>();
        log.p_base = opt_double(j, "p_base");
      } else if (type == "step") {
        log.steps.push_back(step_from_json(j));
      } else if (type == "update" || type == "flush") {
        log.updates.push_back(update_from_json(j));
      } else if (type == "llm") {
        log.llm.push_back({j.at("request").get<std::string>(), j.at("response").get<std::string>(),
                           j.at("status").get<int>()});
      } else if (type == "end") {
        have_end = true;
        log.terminal = j.at("terminal").get<bool>();
        log.collapsed = j.at("collapsed").get<bool>();
        log.rollout_calls = j.at("rollout_calls").get<int>();
        log.critic_calls = j.at("critic_calls").get<int>();
        if (j.contains("error")) log.error = j.at("error").get<std::string>();
      } else {
        corrupt("unknown record type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      corrupt(e.what());
    } catch (const Error& e) {
      if (e.code() == ErrorCode::CorruptLog && std::string(e.what()).rfind("CorruptLog: line", 0) == 0) throw;
      corrupt(e.what());
    }
  }
  if (!have_header) throw Error(ErrorCode::CorruptLog, "line 1: missing header");
  if (!have_end) throw Error(ErrorCode::CorruptLog, "line " + std::to_string(lineno + 1) + ": missing end record (truncated log)");
  return log;
}

inline int count_updates(const EpisodeLog& log) {
  return static_cast<int>(std::count_if(log.updates.begin(), log.updates.end(),
                                        [](const UpdateEvent& u) { return u.kind == "update"; }));
}

// --- Episode runner -----------------------------------------------------------------

// Loop settings after the baseline selector and ablation flags are applied.
struct EffectiveSettings {
  Baseline baseline = Baseline::Planner;
  int n_candidates = 3;
  double alpha = 0.3;
  double beta = 0.7;
  bool use_internal = true;
  bool use_world_model = true;
  bool retro_rl = true;
};

inline EffectiveSettings effective_settings(const ExperimentConfig& c) {
  EffectiveSettings s;
  s.baseline = c.baseline;
  if (c.baseline != Baseline::Planner) {
    s.n_candidates = 1;
    s.alpha = s.beta = 0.0;
    s.use_internal = s.use_world_model = s.retro_rl = false;
    return s;
  }
  s.n_candidates = c.n_candidates;
  s.alpha = c.ablation.no_internal_reflection ? 0.0 : c.alpha;
  s.beta = c.ablation.no_world_model ? 0.0 : c.beta;
  s.use_internal = !c.ablation.no_internal_reflection && c.alpha > 0.0;
  s.use_world_model = !c.ablation.no_world_model && c.beta > 0.0;
  s.retro_rl = !c.ablation.no_retro_rl;
  return s;
}

inline nlohmann::json settings_to_json(const ExperimentConfig& c, const EffectiveSettings& s) {
  return {{"baseline", to_string(s.baseline)},
          {"N", s.n_candidates},
          {"K", c.buffer_k},
          {"alpha", s.alpha},
          {"beta", s.beta},
          {"temperature", c.temperature},
          {"t_max", c.dynamics.t_max},
          {"horizon", c.horizon},
          {"discount", c.discount},
          {"learning_rate", c.learning_rate},
          {"internal_reflection", s.use_internal},
          {"world_model", s.use_world_model},
          {"wm_mode", to_string(c.wm_mode)},
          {"retro_rl", s.retro_rl},
          {"actor", to_string(c.actor)},
          {"critic", to_string(c.critic)}};
}

inline Policy make_policy(const ExperimentConfig& c, std::shared_ptr<const SupplyNetwork> net,
                          std::shared_ptr<LlmClient> llm = nullptr) {
  switch (c.baseline) {
    case Baseline::StaticHold: return make_scripted_policy(std::move(net), ScriptedRule::Fixed, TemplateKind::Hold);
    case Baseline::HaltLlmStandin:
      return make_scripted_policy(std::move(net), ScriptedRule::HaltOnShock, TemplateKind::Reroute);
    case Baseline::Random: return make_parametric_policy(std::move(net), all_templates(), 1.0);
    case Baseline::Planner: break;
  }
  switch (c.actor) {
    case ActorBackend::Scripted: return make_scripted_policy(std::move(net), ScriptedRule::Fixed, TemplateKind::Reroute);
    case ActorBackend::Parametric: return make_parametric_policy(std::move(net), all_templates(), c.temperature);
    case ActorBackend::Llm: {
      Policy p = make_parametric_policy(std::move(net), all_templates(), c.temperature);
      p.backend = ActorBackend::Llm;
      p.llm = std::move(llm);
      return p;
    }
  }
  return make_parametric_policy(std::move(net));
}

inline Critic make_critic(const ExperimentConfig& c, std::shared_ptr<const SupplyNetwork> net,
                          std::shared_ptr<LlmClient> llm = nullptr) {
  Critic k;
  k.backend = c.critic;
  k.net = std::move(net);
  k.penalties = c.penalties;
  k.llm = std::move(llm);
  return k;
}

struct EpisodeOptions {
  int episode = 0;
  std::optional<Policy> policy;                    // starting policy; fresh theta = 0 when absent
  std::optional<WorldModelParams> wm_params;       // learned mode
  std::shared_ptr<LlmClient> llm;                  // shared by LLM actor / critics
  std::optional<std::vector<Shock>> shocks;        // overrides the config schedule
  std::optional<double> p_base;
};

struct EpisodeResult {
  EpisodeLog log;
  Policy policy;  // after the last update
};

inline std::string history_line(const SupplyNetwork& net, const StepLog& s) {
  std::ostringstream os;
  const auto& a = s.candidates[s.selected].action;
  os << "step " << s.step << ": " << (a.template_name.empty() ? "custom" : a.template_name) << ", reward "
     << std::round(s.feedback.reward * 1000.0) / 1000.0 << ", violations " << s.feedback.violations
     << ", mean risk " << std::lround(mean_risk(s.feedback.states_after));
  (void)net;
  return os.str();
}

inline EpisodeResult run_episode(const ExperimentConfig& config, std::uint64_t seed, EpisodeOptions opts = {}) {
  validate_config(config);
  auto net = std::make_shared<const SupplyNetwork>(build_network(config.network));
  const EffectiveSettings S = effective_settings(config);

  EpisodeResult out{EpisodeLog{}, opts.policy ? *opts.policy : make_policy(config, net, opts.llm)};
  EpisodeLog& log = out.log;
  Policy& policy = out.policy;
  if (!policy.net) policy.net = net;
  log.episode = opts.episode;
  log.seed = seed;
  log.settings = settings_to_json(config, S);
  log.p_base = opts.p_base;

  const Critic internal = make_critic(config, net, opts.llm);
  const Critic external = make_critic(config, net, opts.llm);
  const Critic retro = make_critic(config, net, opts.llm);
  WorldModel wm{config.wm_mode, config.horizon, config.discount, opts.wm_params};

  EnvState env = make_env(net, opts.shocks.value_or(config.shocks), config.dynamics, seed, config.feature_mean);
  log.initial_states = env.nodes;
  Rng obs_rng = make_rng(seed, {stream::kObservation});
  Rng actor_rng = make_rng(seed, {stream::kActor});
  Observation obs = observe(env, obs_rng);

  HindsightBuffer buffer(static_cast<std::size_t>(config.buffer_k));
  std::optional<Intervention> previous;
  std::deque<std::string> history;
  const double temperature = S.baseline == Baseline::Random ? 1.0 : config.temperature;

  try {
    while (!env.terminal) {
      PromptContext ctx = make_context(obs, previous, {history.begin(), history.end()});
      StepLog st;
      st.step = env.step;
      st.observation = obs;

      const auto cands = sample_candidates(policy, ctx, S.n_candidates, temperature, actor_rng);
      std::vector<double> s_llm(cands.size(), 0.0), r_wm(cands.size(), 0.0);
      for (std::size_t k = 0; k < cands.size(); ++k) {
        CandidateLog cl{cands[k].action, cands[k].logprob, std::nullopt, {}, std::nullopt, 0.0};
        if (S.use_internal) {
          const auto v = internal_critique(internal, obs, cands[k].action, ctx);
          ++log.critic_calls;
          s_llm[k] = v.score;
          cl.s_llm = v.score;
          cl.internal_feedback = v.feedback;
        }
        if (S.use_world_model) {
          r_wm[k] = wm.predict(env, obs, cands[k].action,
                               make_rng(seed, {stream::kRollout, static_cast<std::uint64_t>(env.step), k}));
          ++log.rollout_calls;
          cl.r_wm = r_wm[k];
        }
        st.candidates.push_back(std::move(cl));
      }
      if (S.alpha > 0.0 || S.beta > 0.0) {
        const auto sel = select_action(cands.size(), s_llm, r_wm, S.alpha, S.beta);
        st.selected = sel.index;
        for (std::size_t k = 0; k < cands.size(); ++k) st.candidates[k].joint = sel.joint[k];
      }
      const Candidate& chosen = cands[st.selected];

      StepResult res = env_step(env, chosen.action, obs_rng);
      const auto ext = external_assess(external, obs, chosen.action, res.feedback);
      st.feedback = res.feedback;
      st.external_score = ext.score;
      st.external_feedback = ext.feedback;

      StepRecord rec;
      rec.step = st.step;
      rec.observation = obs;
      rec.action = chosen.action;
      rec.external_score = ext.score;
      rec.external_feedback = ext.feedback;
      rec.feedback = res.feedback;
      rec.logprob = chosen.logprob;
      rec.context_features = context_features(*net, ctx);
      buffer.push(std::move(rec));
      st.buffer_size = buffer.size();

      if (config.history_length > 0) {
        history.push_back(history_line(*net, st));
        while (static_cast<int>(history.size()) > config.history_length) history.pop_front();
      }
      log.steps.push_back(std::move(st));

      if (buffer.full() || env.terminal) {
        UpdateEvent ev;
        ev.step = log.steps.back().step;
        ev.terminal = env.terminal;
        const bool train = S.retro_rl && policy.trainable();
        ev.kind = train ? "update" : "flush";
        if (train) {
          UpdateBatch batch;
          batch.learning_rate = config.learning_rate;
          batch.temperature = temperature;
          for (std::size_t j = 0; j < buffer.size(); ++j) {
            const auto v = retrospective_score(retro, buffer, j, res.observation);
            const auto& b = buffer.at(j);
            RetroLog rl{b.step, v.score, v.feedback, normalize_reward(v.score), b.logprob, 0.0};
            rl.loss = reinforce_loss(rl.r, rl.logprob);
            ev.loss_sum += rl.loss;
            batch.items.push_back({rl.r, rl.logprob, rl.loss, b.context_features,
                                   library_index(policy, b.action.template_name)});
            ev.records.push_back(std::move(rl));
          }
          auto upd = update_policy(policy, batch);
          ev.grad_norm = upd.gradient.norm();
          policy = std::move(upd.policy);
          ev.theta_norm = policy.theta.norm();
        }
        buffer.flush();
        ev.buffer_after = buffer.size();
        log.updates.push_back(std::move(ev));
      }

      previous = chosen.action;
      obs = std::move(res.observation);
    }
    log.terminal = true;
  } catch (const Error& e) {
    log.error = "step " + std::to_string(env.step) + ": " + e.what();
  }
  log.collapsed = env.collapsed;
  if (opts.llm) log.llm = opts.llm->take_transcript();
  return out;
}

}  // namespace reflplan
