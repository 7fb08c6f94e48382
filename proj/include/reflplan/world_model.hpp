#pragma once
//
// Physical-reward prediction for candidate actions.
//
// Two modes behind one interface:
//   * oracle  - clone the simulator and roll the candidate forward, then a
//               default continuation policy; exact up to the horizon.
//   * learned - encode the observation into a latent vector and iterate a
//               ridge-fitted linear latent dynamics + reward head.
//

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dynamics.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace reflplan {

// A copyable simulator whose step returns the realized reward.
template <class Env, class Action>
concept Simulator = std::copy_constructible<Env> && requires(Env& env, const Env& cenv, const Action& a, Rng& rng) {
  { simulate_step(env, a, rng) } -> std::convertible_to<double>;
  { is_terminal(cenv) } -> std::convertible_to<bool>;
};

inline double simulate_step(EnvState& env, const Intervention& a, Rng& rng) {
  return env_step(env, a, rng).feedback.reward;
}
inline bool is_terminal(const EnvState& env) { return env.terminal; }

// sum_{h<horizon} discount^h * r_h from executing `action` on a private copy of
// `snapshot`, then `continuation(env)` for the remaining steps. The live
// environment is never touched.
template <class Env, class Action, class Continuation>
  requires Simulator<Env, Action> && std::invocable<Continuation&, const Env&>
double rollout_oracle(const Env& snapshot, const Action& action, int horizon, Continuation&& continuation,
                      double discount, Rng rng) {
  if (horizon < 1) throw Error(ErrorCode::ParamOutOfRange, "horizon must be >= 1");
  Env env = snapshot;
  double total = 0.0;
  double weight = 1.0;
  for (int h = 0; h < horizon && !is_terminal(env); ++h) {
    const double r = h == 0 ? simulate_step(env, action, rng) : simulate_step(env, Action(continuation(env)), rng);
    total += weight * r;
    weight *= discount;
    if (weight == 0.0) break;
  }
  return total;
}

// --- Learned latent model ---------------------------------------------------------

struct LatentState {
  Eigen::VectorXd z;
};

struct WorldModelParams {
  Eigen::MatrixXd encoder;       // d_z x d_obs
  Eigen::VectorXd encoder_bias;  // d_z
  Eigen::MatrixXd dyn_state;     // d_z x d_z
  Eigen::MatrixXd dyn_action;    // d_z x d_u
  Eigen::VectorXd dyn_bias;      // d_z
  Eigen::VectorXd reward_weights;
  double reward_bias = 0.0;
  std::size_t sample_count = 0;
  double residual_norm = 0.0;
  bool initialized = false;

  Eigen::Index latent_dim() const { return encoder.rows(); }
  Eigen::Index obs_dim() const { return encoder.cols(); }
  Eigen::Index action_dim() const { return dyn_action.cols(); }
};

// Zero dynamics and reward head with a fixed encoder. With `identity` the
// encoder is I (requires d_z == d_obs); otherwise a seeded Gaussian projection.
inline WorldModelParams init_world_model(Eigen::Index d_obs, Eigen::Index d_u, Eigen::Index d_z, std::uint64_t seed,
                                         bool identity = false) {
  if (d_obs < 1 || d_u < 0 || d_z < 1) throw Error(ErrorCode::DimensionMismatch, "world-model dimensions");
  WorldModelParams p;
  if (identity) {
    if (d_z != d_obs) throw Error(ErrorCode::DimensionMismatch, "identity encoder needs d_z == d_obs");
    p.encoder = Eigen::MatrixXd::Identity(d_z, d_obs);
  } else {
    Rng rng = make_rng(seed, {stream::kEncoder});
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d_obs)));
    p.encoder.resize(d_z, d_obs);
    for (Eigen::Index r = 0; r < d_z; ++r)
      for (Eigen::Index c = 0; c < d_obs; ++c) p.encoder(r, c) = normal(rng);
  }
  p.encoder_bias = Eigen::VectorXd::Zero(d_z);
  p.dyn_state = Eigen::MatrixXd::Zero(d_z, d_z);
  p.dyn_action = Eigen::MatrixXd::Zero(d_z, d_u);
  p.dyn_bias = Eigen::VectorXd::Zero(d_z);
  p.reward_weights = Eigen::VectorXd::Zero(d_z);
  p.initialized = true;
  return p;
}

inline LatentState encode(const Eigen::VectorXd& features, const WorldModelParams& p) {
  if (features.size() != p.obs_dim())
    throw Error(ErrorCode::DimensionMismatch, "observation has " + std::to_string(features.size()) +
                                                  " features, encoder expects " + std::to_string(p.obs_dim()));
  return {p.encoder * features + p.encoder_bias};
}

inline Eigen::VectorXd latent_dynamics(const Eigen::VectorXd& z, const Eigen::VectorXd& u, const WorldModelParams& p) {
  return p.dyn_state * z + p.dyn_action * u + p.dyn_bias;
}

inline double reward_head(const Eigen::VectorXd& z, const WorldModelParams& p) {
  return p.reward_weights.dot(z) + p.reward_bias;
}

// Iterates z_{h+1} = dynamics(z_h, u) and sums discount^h * reward_head(z_{h+1}).
// The action embedding is held for the whole horizon.
inline double rollout_latent(const LatentState& z0, const Eigen::VectorXd& action_embedding, int horizon,
                             const WorldModelParams& p, double discount) {
  if (!p.initialized) throw Error(ErrorCode::UnfittedModel, "world model has not been initialized or fitted");
  if (horizon < 1) throw Error(ErrorCode::ParamOutOfRange, "horizon must be >= 1");
  if (z0.z.size() != p.latent_dim() || action_embedding.size() != p.action_dim())
    throw Error(ErrorCode::DimensionMismatch, "latent/action dimension");
  Eigen::VectorXd z = z0.z;
  double total = 0.0, weight = 1.0;
  for (int h = 0; h < horizon; ++h) {
    z = latent_dynamics(z, action_embedding, p);
    total += weight * reward_head(z, p);
    weight *= discount;
  }
  return total;
}

struct Transition {
  Eigen::VectorXd obs;
  Eigen::VectorXd action;
  double reward = 0.0;
  Eigen::VectorXd next_obs;
};

// Ridge least squares: argmin ||X b - Y||^2 + lambda ||b||^2, columnwise.
inline Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda) {
  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += lambda;
  return gram.ldlt().solve(X.transpose() * Y);
}

// Fits latent dynamics z' ~ A z + B u + c and reward r ~ w.z' + b on encoded
// transitions. The encoder is kept; `params` is not modified.
inline WorldModelParams fit_world_model(const std::vector<Transition>& transitions, const WorldModelParams& params,
                                        double lambda = 1e-3) {
  if (!params.initialized) throw Error(ErrorCode::UnfittedModel, "fit needs an initialized encoder");
  const Eigen::Index dz = params.latent_dim(), du = params.action_dim();
  const auto n = static_cast<Eigen::Index>(transitions.size());
  if (n < dz)
    throw Error(ErrorCode::InsufficientData,
                std::to_string(n) + " transitions, need at least d_z = " + std::to_string(dz));
  if (!(lambda >= 0.0)) throw Error(ErrorCode::ParamOutOfRange, "ridge lambda must be >= 0");

  Eigen::MatrixXd X(n, dz + du + 1), Z1(n, dz), H(n, dz + 1);
  Eigen::VectorXd R(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& tr = transitions[static_cast<std::size_t>(k)];
    if (tr.action.size() != du) throw Error(ErrorCode::DimensionMismatch, "transition action dimension");
    const Eigen::VectorXd z = encode(tr.obs, params).z;
    const Eigen::VectorXd z1 = encode(tr.next_obs, params).z;
    X.row(k) << z.transpose(), tr.action.transpose(), 1.0;
    Z1.row(k) = z1.transpose();
    H.row(k) << z1.transpose(), 1.0;
    R(k) = tr.reward;
  }

  WorldModelParams out = params;
  const Eigen::MatrixXd dyn = ridge_solve(X, Z1, lambda);  // (dz+du+1) x dz
  out.dyn_state = dyn.topRows(dz).transpose();
  out.dyn_action = dyn.middleRows(dz, du).transpose();
  out.dyn_bias = dyn.bottomRows(1).transpose();
  const Eigen::VectorXd head = ridge_solve(H, R, lambda);
  out.reward_weights = head.head(dz);
  out.reward_bias = head(dz);

  const double dyn_res = (X * dyn - Z1).squaredNorm();
  const double rew_res = (H * head - R).squaredNorm();
  out.residual_norm = std::sqrt(dyn_res + rew_res);
  out.sample_count = static_cast<std::size_t>(n);
  out.initialized = true;
  return out;
}

// --- Checkpoints ------------------------------------------------------------------

namespace detail {
inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  Eigen::MatrixXd m(rows, cols);
  const auto& data = j.at("data");
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = data.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
  return m;
}
}  // namespace detail

inline nlohmann::json world_model_to_json(const WorldModelParams& p) {
  return {{"encoder", detail::matrix_to_json(p.encoder)},
          {"encoder_bias", detail::matrix_to_json(p.encoder_bias)},
          {"dyn_state", detail::matrix_to_json(p.dyn_state)},
          {"dyn_action", detail::matrix_to_json(p.dyn_action)},
          {"dyn_bias", detail::matrix_to_json(p.dyn_bias)},
          {"reward_weights", detail::matrix_to_json(p.reward_weights)},
          {"reward_bias", p.reward_bias},
          {"sample_count", p.sample_count},
          {"residual_norm", p.residual_norm},
          {"initialized", p.initialized}};
}

inline WorldModelParams world_model_from_json(const nlohmann::json& j) {
  WorldModelParams p;
  p.encoder = detail::matrix_from_json(j.at("encoder"));
  p.encoder_bias = detail::matrix_from_json(j.at("encoder_bias"));
  p.dyn_state = detail::matrix_from_json(j.at("dyn_state"));
  p.dyn_action = detail::matrix_from_json(j.at("dyn_action"));
  p.dyn_bias = detail::matrix_from_json(j.at("dyn_bias"));
  p.reward_weights = detail::matrix_from_json(j.at("reward_weights"));
  p.reward_bias = j.at("reward_bias").get<double>();
  p.sample_count = j.at("sample_count").get<std::size_t>();
  p.residual_norm = j.at("residual_norm").get<double>();
  p.initialized = j.at("initialized").get<bool>();
  const auto dz = p.encoder.rows();
  if (p.encoder_bias.size() != dz || p.dyn_state.rows() != dz || p.dyn_state.cols() != dz ||
      p.dyn_action.rows() != dz || p.dyn_bias.size() != dz || p.reward_weights.size() != dz)
    throw Error(ErrorCode::DimensionMismatch, "inconsistent world-model checkpoint");
  return p;
}

// --- Supply-chain feature maps ------------------------------------------------------

// Flattened global observation: per node (I/4cap, tanh(C/20000), Omega/100,
// R/100, last demand/cap), active shock kinds, step/t_max.
inline Eigen::VectorXd observation_features(const SupplyNetwork& net, const Observation& obs) {
  const auto n = static_cast<Eigen::Index>(net.node_count());
  Eigen::VectorXd f = Eigen::VectorXd::Zero(5 * n + kShockKinds + 1);
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const auto k = static_cast<Eigen::Index>(5 * i);
    const double cap = net.node(i).capacity;
    const auto& s = obs.nodes.at(i);
    f(k) = s.inventory / (4.0 * cap);
    f(k + 1) = std::tanh(s.cash / 20000.0);
    f(k + 2) = s.compliance / 100.0;
    f(k + 3) = s.risk / 100.0;
    f(k + 4) = obs.last_demand.empty() ? 0.0 : obs.last_demand[i] / cap;
  }
  for (const auto& s : obs.shocks) f(5 * n + static_cast<int>(s.kind)) = 1.0;
  f(5 * n + kShockKinds) = static_cast<double>(obs.step) / static_cast<double>(std::max(1, obs.t_max));
  return f;
}

inline Eigen::Index observation_feature_dim(const SupplyNetwork& net) {
  return static_cast<Eigen::Index>(5 * net.node_count() + kShockKinds + 1);
}

// Per-edge order and ship over source capacity, external buys over capacity,
// halt flags, export-review flags.
inline Eigen::VectorXd embed_action(const SupplyNetwork& net, const Intervention& a) {
  const auto ne = static_cast<Eigen::Index>(net.edge_count());
  const auto nn = static_cast<Eigen::Index>(net.node_count());
  Eigen::VectorXd u = Eigen::VectorXd::Zero(2 * ne + 3 * nn);
  for (EdgeIndex e = 0; e < net.edge_count(); ++e) {
    const double cap = net.node(net.edge_source(e)).capacity;
    const auto k = static_cast<Eigen::Index>(e);
    if (!a.order.empty()) u(k) = a.order[e] / cap;
    if (!a.ship.empty()) u(ne + k) = a.ship[e] / cap;
  }
  for (NodeIndex i = 0; i < net.node_count(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    if (!a.external_buy.empty()) u(2 * ne + k) = a.external_buy[i] / net.node(i).capacity;
    if (a.halts.count(net.node(i).id)) u(2 * ne + nn + k) = 1.0;
    if (a.export_params && a.export_params->hold_nodes.count(net.node(i).id)) u(2 * ne + 2 * nn + k) = 1.0;
  }
  return u;
}

inline Eigen::Index action_embedding_dim(const SupplyNetwork& net) {
  return static_cast<Eigen::Index>(2 * net.edge_count() + 3 * net.node_count());
}

// --- Mode selector --------------------------------------------------------------

enum class WorldModelMode { Oracle, Learned };

inline std::string to_string(WorldModelMode m) { return m == WorldModelMode::Oracle ? "oracle" : "learned"; }

inline WorldModelMode wm_mode_from_string(const std::string& s) {
  if (s == "oracle") return WorldModelMode::Oracle;
  if (s == "learned") return WorldModelMode::Learned;
  throw Error(ErrorCode::InvalidConfig, "unknown world-model mode '" + s + "'");
}

struct WorldModel {
  WorldModelMode mode = WorldModelMode::Oracle;
  int horizon = 3;
  double discount = 0.9;
  std::optional<WorldModelParams> params;  // learned mode only

  // Predicted physical reward r_wm for `action` taken now.
  double predict(const EnvState& env, const Observation& obs, const Intervention& action, Rng rng) const {
    if (mode == WorldModelMode::Oracle)
      return rollout_oracle(env, action, horizon, [](const EnvState& e) { return hold_intervention(e); }, discount,
                            std::move(rng));
    if (!params) throw Error(ErrorCode::UnfittedModel, "learned world model has no parameters");
    const auto z0 = encode(observation_features(env.network(), obs), *params);
    return rollout_latent(z0, embed_action(env.network(), action), horizon, *params, discount);
  }
};

}  // namespace reflplan
