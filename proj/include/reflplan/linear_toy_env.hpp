#pragma once
//
// Synthetic environment with linear dynamics and linear reward, used to check
// that the learned latent model recovers an oracle it can represent exactly:
//   x' = A x + B u,   r = c . x'
//

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "rng.hpp"
#include "world_model.hpp"

namespace reflplan {

struct LinearToyAction {
  Eigen::VectorXd u;
};

struct LinearToyEnv {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::VectorXd c;
  Eigen::VectorXd x;
  LinearToyAction last;
};

inline double simulate_step(LinearToyEnv& env, const LinearToyAction& a, Rng&) {
  env.x = env.A * env.x + env.B * a.u;
  env.last = a;
  return env.c.dot(env.x);
}

inline bool is_terminal(const LinearToyEnv&) { return false; }

// Continuation: repeat the previous action.
inline LinearToyAction toy_hold(const LinearToyEnv& env) { return env.last; }

// Random stable system: A scaled to spectral norm 0.8.
inline LinearToyEnv make_linear_toy_env(int state_dim, int action_dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x70u});
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](int r, int c) {
    Eigen::MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
  };
  LinearToyEnv env;
  env.A = draw(state_dim, state_dim);
  env.A *= 0.8 / env.A.jacobiSvd().singularValues()(0);
  env.B = draw(state_dim, action_dim) * 0.5;
  env.c = draw(state_dim, 1).col(0);
  env.x = Eigen::VectorXd::Zero(state_dim);
  env.last.u = Eigen::VectorXd::Zero(action_dim);
  return env;
}

// Transitions from uniformly scattered states and actions.
inline std::vector<Transition> sample_toy_transitions(const LinearToyEnv& proto, int count, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x71u});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    LinearToyEnv env = proto;
    for (Eigen::Index i = 0; i < env.x.size(); ++i) env.x(i) = normal(rng);
    LinearToyAction a{Eigen::VectorXd(env.B.cols())};
    for (Eigen::Index i = 0; i < a.u.size(); ++i) a.u(i) = normal(rng);
    Transition tr;
    tr.obs = env.x;
    tr.action = a.u;
    tr.reward = simulate_step(env, a, rng);
    tr.next_obs = env.x;
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace reflplan
