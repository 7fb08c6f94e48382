#include <gtest/gtest.h>

#include <functional>
#include <memory>

#include <reflplan/reflplan.hpp>

#include "test_support.hpp"

using namespace reflplan;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no reflplan::Error thrown";
  return ErrorCode::Io;
}

std::shared_ptr<const SupplyNetwork> default_net() {
  return std::make_shared<const SupplyNetwork>(build_network(semisim_v1_spec()));
}

Policy random_policy(std::shared_ptr<const SupplyNetwork> net, std::uint64_t seed, double temperature = 1.0) {
  auto p = make_parametric_policy(std::move(net), all_templates(), temperature);
  Rng rng = make_rng(seed, {});
  std::normal_distribution<double> n(0.0, 0.5);
  for (Eigen::Index r = 0; r < p.theta.rows(); ++r)
    for (Eigen::Index c = 0; c < p.theta.cols(); ++c) p.theta(r, c) = n(rng);
  return p;
}

UpdateBatch random_batch(const SupplyNetwork& net, const Policy& policy, Rng& rng, int size) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  UpdateBatch b;
  b.temperature = policy.temperature;
  for (int k = 0; k < size; ++k) {
    const auto ctx = make_context(testsupport::random_observation(net, rng), std::nullopt, {});
    UpdateItem it;
    it.phi = context_features(net, ctx);
    it.template_index = static_cast<std::size_t>((uni(rng) + 1.0) * 6.0) % policy.library.size();
    it.r = uni(rng);
    b.items.push_back(it);
  }
  return b;
}

double batch_loss(const Eigen::MatrixXd& theta, const UpdateBatch& b) {
  double s = 0.0;
  for (const auto& it : b.items) s += testsupport::reference_loss(theta, it.phi, it.template_index, it.r, b.temperature);
  return s;
}

ExperimentConfig quick_config(int k) {
  ExperimentConfig c;
  c.buffer_k = k;
  c.seed = 3;
  return c;
}

}  // namespace

// --- primitives ------------------------------------------------------------------------

TEST(NormalizeReward, EndpointsAndMidpoint) {
  EXPECT_EQ(normalize_reward(100.0), 1.0);
  EXPECT_EQ(normalize_reward(50.0), 0.0);
  EXPECT_EQ(normalize_reward(0.0), -1.0);
  EXPECT_EQ(code_of([] { normalize_reward(100.5); }), ErrorCode::ScoreOutOfRange);
  EXPECT_EQ(code_of([] { normalize_reward(-1e-9); }), ErrorCode::ScoreOutOfRange);
  EXPECT_EQ(code_of([] { normalize_reward(std::nan("")); }), ErrorCode::ScoreOutOfRange);
}

TEST(NormalizeReward, StrictlyIncreasingAndInvertible) {
  double prev = -2.0;
  for (int k = 0; k <= 1000; ++k) {
    const double s = k / 10.0;
    const double r = normalize_reward(s);
    EXPECT_GT(r, prev);
    prev = r;
    EXPECT_NEAR(denormalize_reward(r), s, 1e-12);
  }
  for (int k = 0; k <= 100; ++k) EXPECT_NEAR(denormalize_reward(normalize_reward(k)), k, 1e-12);
}

TEST(ReinforceLoss, Examples) {
  EXPECT_EQ(reinforce_loss(0.0, -2.0), 0.0);
  EXPECT_EQ(reinforce_loss(0.0, -100.0), 0.0);
  EXPECT_EQ(reinforce_loss(1.0, -2.0), 2.0);
  EXPECT_EQ(reinforce_loss(-1.0, -2.0), -2.0);
}

TEST(SelectAction, ReducesToEitherSignal) {
  const std::vector<double> s = {10, 90, 40}, r = {0.5, -0.2, 0.9};
  EXPECT_EQ(select_action(3, s, r, 1.0, 0.0).index, 1u);
  EXPECT_EQ(select_action(3, s, r, 0.0, 1.0).index, 2u);
  const auto sel = select_action(3, s, r, 0.3, 0.7);
  EXPECT_NEAR(sel.joint[0], 0.3 * (-0.8) + 0.7 * 0.5, 1e-15);
  EXPECT_EQ(select_action(2, {50, 50}, {0.1, 0.1}, 1, 1).index, 0u);  // ties go to the first
}

TEST(SelectAction, Errors) {
  EXPECT_EQ(code_of([] { select_action(3, {1, 2}, {1, 2, 3}, 1, 1); }), ErrorCode::LengthMismatch);
  EXPECT_EQ(code_of([] { select_action(0, {}, {}, 1, 1); }), ErrorCode::LengthMismatch);
  EXPECT_EQ(code_of([] { select_action(1, {1}, {1}, 0, 0); }), ErrorCode::DegenerateWeights);
  EXPECT_EQ(code_of([] { select_action(1, {1}, {1}, -1, 1); }), ErrorCode::DegenerateWeights);
}

TEST(SelectAction, InvariantUnderJointRescaling) {
  Rng rng = make_rng(5, {});
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(uni(rng) * 8);
    std::vector<double> s(n), r(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = 100.0 * uni(rng);
      r[k] = 2.0 * uni(rng) - 1.0;
    }
    const double a = uni(rng), b = uni(rng) + 1e-3;
    const auto base = select_action(n, s, r, a, b).index;
    for (double c : {1e-3, 0.5, 2.0, 1e3}) EXPECT_EQ(select_action(n, s, r, c * a, c * b).index, base);
  }
}

// --- policy update --------------------------------------------------------------------------

TEST(UpdatePolicy, ZeroRewardLeavesThetaUnchanged) {
  auto net = default_net();
  const auto p = random_policy(net, 1);
  Rng rng = make_rng(2, {});
  auto b = random_batch(*net, p, rng, 5);
  for (auto& it : b.items) it.r = 0.0;
  EXPECT_EQ(update_policy(p, b).policy.theta, p.theta);
}

TEST(UpdatePolicy, PositiveRewardRaisesTheChosenLogProb) {
  auto net = default_net();
  const auto p = random_policy(net, 3);
  Rng rng = make_rng(4, {});
  for (int trial = 0; trial < 20; ++trial) {
    auto b = random_batch(*net, p, rng, 1);
    b.items[0].r = 1.0;
    b.learning_rate = 0.01;
    const auto& it = b.items[0];
    const auto before = template_log_probs(p, it.phi, 1.0)(static_cast<Eigen::Index>(it.template_index));
    const auto after = template_log_probs(update_policy(p, b).policy, it.phi, 1.0)(static_cast<Eigen::Index>(it.template_index));
    EXPECT_GT(after, before);
  }
}

TEST(UpdatePolicy, GradientMatchesFiniteDifferences) {
  auto net = default_net();
  Rng rng = make_rng(6, {});
  std::uniform_int_distribution<Eigen::Index> pick_r(0, 11), pick_c(0, 29);
  for (double temperature : {1.0, 0.5}) {
    const auto p = random_policy(net, 7, temperature);
    const auto b = random_batch(*net, p, rng, 3);
    const auto grad = policy_gradient(p, b);
    for (int k = 0; k < 25; ++k) {
      const Eigen::Index r = pick_r(rng), c = pick_c(rng);
      const double eps = 1e-5;
      Eigen::MatrixXd tp = p.theta, tm = p.theta;
      tp(r, c) += eps;
      tm(r, c) -= eps;
      const double fd = (batch_loss(tp, b) - batch_loss(tm, b)) / (2 * eps);
      const double rel = std::abs(fd - grad(r, c)) / std::max({std::abs(fd), std::abs(grad(r, c)), 1e-6});
      EXPECT_LT(rel, 1e-4) << r << "," << c;
    }
  }
}

TEST(UpdatePolicy, StepIsThetaMinusLearningRateTimesGradient) {
  auto net = default_net();
  const auto p = random_policy(net, 8);
  Rng rng = make_rng(9, {});
  auto b = random_batch(*net, p, rng, 4);
  b.learning_rate = 0.2;
  const auto u = update_policy(p, b);
  EXPECT_TRUE(u.policy.theta.isApprox(p.theta - 0.2 * u.gradient, 1e-15));
}

TEST(UpdatePolicy, Errors) {
  auto net = default_net();
  const auto p = random_policy(net, 1);
  EXPECT_EQ(code_of([&] { update_policy(p, UpdateBatch{}); }), ErrorCode::EmptyBatch);
  Rng rng = make_rng(1, {});
  const auto b = random_batch(*net, p, rng, 1);
  const auto scripted = make_scripted_policy(net, ScriptedRule::Fixed);
  EXPECT_EQ(code_of([&] { update_policy(scripted, b); }), ErrorCode::NonTrainableBackend);
}

// --- loop ---------------------------------------------------------------------------------------

TEST(RunEpisode, UpdateCadenceFollowsK) {
  for (const auto& [k, expected] : std::vector<std::pair<int, int>>{{3, 10}, {10, 3}, {7, 5}, {1, 30}}) {
    const auto r = run_episode(quick_config(k), 11);
    ASSERT_FALSE(r.log.error) << *r.log.error;
    ASSERT_EQ(r.log.steps.size(), 30u);
    EXPECT_EQ(count_updates(r.log), expected) << "K=" << k;
    EXPECT_EQ(static_cast<int>(r.log.updates.size()), expected);
    for (const auto& u : r.log.updates) EXPECT_EQ(u.buffer_after, 0u);
    EXPECT_TRUE(r.log.updates.back().terminal);
    for (const auto& s : r.log.steps) EXPECT_LE(s.buffer_size, static_cast<std::size_t>(k));
  }
}

TEST(RunEpisode, EveryBufferedRecordIsRescoredOnce) {
  const auto r = run_episode(quick_config(3), 12);
  std::vector<int> seen;
  for (const auto& u : r.log.updates)
    for (const auto& rec : u.records) {
      seen.push_back(rec.step);
      EXPECT_DOUBLE_EQ(rec.r, normalize_reward(rec.s_retro));
      EXPECT_DOUBLE_EQ(rec.loss, -rec.r * rec.logprob);
    }
  ASSERT_EQ(seen.size(), 30u);
  for (int t = 1; t <= 30; ++t) EXPECT_EQ(seen[static_cast<std::size_t>(t - 1)], t);
}

TEST(RunEpisode, NoWorldModelAblationNeverRollsOut) {
  auto c = quick_config(3);
  c.ablation.no_world_model = true;
  const auto r = run_episode(c, 13);
  EXPECT_EQ(r.log.rollout_calls, 0);
  EXPECT_EQ(r.log.settings.at("beta").get<double>(), 0.0);
  for (const auto& s : r.log.steps)
    for (const auto& cand : s.candidates) EXPECT_FALSE(cand.r_wm.has_value());
}

TEST(RunEpisode, NoInternalReflectionAblationNeverCritiques) {
  auto c = quick_config(3);
  c.ablation.no_internal_reflection = true;
  const auto r = run_episode(c, 13);
  EXPECT_EQ(r.log.critic_calls, 0);
  EXPECT_EQ(r.log.settings.at("alpha").get<double>(), 0.0);
  EXPECT_GT(r.log.rollout_calls, 0);
}

TEST(RunEpisode, NoRetroRlAblationKeepsThetaFixed) {
  auto c = quick_config(3);
  c.ablation.no_retro_rl = true;
  const auto r = run_episode(c, 14);
  EXPECT_EQ(count_updates(r.log), 0);
  EXPECT_TRUE(r.policy.theta.isZero(0.0));
  EXPECT_EQ(r.log.updates.size(), 10u);  // buffer still flushes
  for (const auto& u : r.log.updates) EXPECT_EQ(u.kind, "flush");
}

TEST(RunEpisode, HaltBaselineSamplesOneCandidateWithoutScoring) {
  auto c = quick_config(3);
  c.baseline = Baseline::HaltLlmStandin;
  const auto r = run_episode(c, 15);
  EXPECT_EQ(r.log.rollout_calls, 0);
  EXPECT_EQ(r.log.critic_calls, 0);
  for (const auto& s : r.log.steps) {
    EXPECT_EQ(s.candidates.size(), 1u);
    EXPECT_EQ(s.candidates[0].action.template_name, "halt_all");  // the default schedule has a shock at every step
  }
}

TEST(RunEpisode, DeterministicGivenSeed) {
  const auto c = quick_config(3);
  const auto a = run_episode(c, 21), b = run_episode(c, 21);
  EXPECT_EQ(episode_log_to_jsonl(a.log), episode_log_to_jsonl(b.log));
  EXPECT_EQ(a.policy.theta, b.policy.theta);
  EXPECT_NE(episode_log_to_jsonl(run_episode(c, 22).log), episode_log_to_jsonl(a.log));
}

TEST(RunEpisode, LoggedSelectionMaximizesTheJointScore) {
  const auto r = run_episode(quick_config(3), 23);
  for (const auto& s : r.log.steps) {
    ASSERT_EQ(s.candidates.size(), 3u);
    for (const auto& cand : s.candidates) {
      ASSERT_TRUE(cand.s_llm && cand.r_wm);
      EXPECT_NEAR(cand.joint, 0.3 * normalize_reward(*cand.s_llm) + 0.7 * *cand.r_wm, 1e-12);
      EXPECT_LE(cand.joint, s.candidates[s.selected].joint);
    }
  }
}

TEST(RunEpisode, CarriedPolicyStartsFromTheGivenTheta) {
  auto net = default_net();
  EpisodeOptions opts;
  opts.policy = random_policy(net, 5);
  auto c = quick_config(3);
  c.ablation.no_retro_rl = true;
  const auto r = run_episode(c, 1, opts);
  EXPECT_EQ(r.policy.theta, opts.policy->theta);
}

// --- episode log ----------------------------------------------------------------------------

TEST(EpisodeLogJsonl, RoundTripIsLossless) {
  auto c = quick_config(3);
  EpisodeOptions opts;
  opts.p_base = 1234.5;
  const auto r = run_episode(c, 31, opts);
  const auto text = episode_log_to_jsonl(r.log);
  const auto back = episode_log_from_jsonl(text);
  EXPECT_EQ(episode_log_to_jsonl(back), text);
  EXPECT_EQ(back.steps.size(), r.log.steps.size());
  EXPECT_EQ(back.p_base, 1234.5);
  EXPECT_EQ(count_updates(back), count_updates(r.log));
}

TEST(EpisodeLogJsonl, CorruptInputNamesTheLine) {
  const auto text = episode_log_to_jsonl(run_episode(quick_config(3), 32).log);
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) lines.push_back(l);

  auto join = [](const std::vector<std::string>& ls) {
    std::string s;
    for (const auto& l : ls) s += l + "\n";
    return s;
  };
  auto message_of = [](const std::string& t) -> std::string {
    try {
      episode_log_from_jsonl(t);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::CorruptLog);
      return e.what();
    }
    ADD_FAILURE() << "accepted a corrupt log";
    return "";
  };

  auto truncated = lines;
  truncated.resize(5);
  EXPECT_NE(message_of(join(truncated)).find("line 6"), std::string::npos);

  auto garbled = lines;
  garbled[3] = garbled[3].substr(0, garbled[3].size() / 2);
  EXPECT_NE(message_of(join(garbled)).find("line 4"), std::string::npos);

  auto headless = lines;
  headless.erase(headless.begin());
  EXPECT_NE(message_of(join(headless)).find("line 1"), std::string::npos);

  auto unknown = lines;
  unknown[2] = R"({"type":"mystery"})";
  EXPECT_NE(message_of(join(unknown)).find("line 3"), std::string::npos);

  auto trailing = lines;
  trailing.push_back(lines[1]);
  EXPECT_NE(message_of(join(trailing)).find("line " + std::to_string(lines.size() + 1)), std::string::npos);
}
