#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <functional>
#include <memory>
#include <thread>

#include <httplib.h>

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

PromptContext context_at_start(const std::shared_ptr<const SupplyNetwork>& net, std::vector<Shock> shocks,
                               std::uint64_t seed = 1) {
  auto env = make_env(net, std::move(shocks), {}, seed);
  advance_shocks(env);
  Rng rng = make_rng(seed, {stream::kObservation});
  return make_context(observe(env, rng), std::nullopt, {});
}

Critic scripted_critic(std::shared_ptr<const SupplyNetwork> net) {
  Critic c;
  c.net = std::move(net);
  return c;
}

ExecFeedback feedback_with(double reward, int violations, std::size_t nodes) {
  ExecFeedback fb;
  fb.reward = reward;
  fb.violations = violations;
  fb.violation.assign(nodes, false);
  fb.risk_before.assign(nodes, 10.0);
  fb.states_after.assign(nodes, NodeState{0, 0, 100, 10, true});
  return fb;
}

// Minimal chat-completions endpoint on a loopback port.
class FakeLlm {
 public:
  explicit FakeLlm(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_auth = req.get_header_value("Authorization");
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeLlm() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  std::atomic<int> hits{0};
  std::string last_auth;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string reply(const std::vector<std::string>& contents) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array();
  for (const auto& c : contents) j["choices"].push_back({{"message", {{"role", "assistant"}, {"content", c}}}});
  return j.dump();
}

LlmConfig fast_config(const std::string& endpoint) {
  LlmConfig c;
  c.endpoint = endpoint;
  c.timeout_ms = 2000;
  c.max_retries = 1;
  c.api_key_env = "REFLPLAN_TEST_LLM_KEY";
  return c;
}

}  // namespace

// --- templates ------------------------------------------------------------------------

TEST(Templates, LibraryHasTwelveNamedEntries) {
  EXPECT_EQ(all_templates().size(), 12u);
  for (auto k : all_templates()) {
    EXPECT_EQ(template_from_string(to_string(k)), k);
    EXPECT_FALSE(template_description(k).empty());
  }
  EXPECT_FALSE(template_from_string("teleport").has_value());
}

TEST(Templates, EveryTemplateYieldsAnExecutableAction) {
  auto net = default_net();
  Rng rng = make_rng(2, {});
  for (int trial = 0; trial < 20; ++trial) {
    const auto obs = testsupport::random_observation(*net, rng);
    const auto ctx = make_context(obs, std::nullopt, {});
    for (auto k : all_templates()) {
      const auto a = instantiate(*net, k, ctx);
      EXPECT_EQ(a.template_name, to_string(k));
      ASSERT_EQ(a.order.size(), net->edge_count());
      ASSERT_EQ(a.ship.size(), net->edge_count());
      ASSERT_EQ(a.external_buy.size(), net->node_count());
      for (double x : a.order) EXPECT_TRUE(std::isfinite(x) && x >= 0.0);
      for (double x : a.external_buy) EXPECT_TRUE(std::isfinite(x) && x >= 0.0);
      auto env = make_env(net, default_shock_schedule(), {}, 3);
      Rng r = make_rng(3, {});
      EXPECT_NO_THROW(env_step(env, a, r));
    }
  }
}

TEST(Templates, HaltAllStopsEveryNodeAndRerouteAvoidsSanctions) {
  auto net = default_net();
  const auto ctx = context_at_start(net, {{ShockKind::Sanction, {"foundry-b"}, 1.0, 1, 5, ""}});
  const auto halt = instantiate(*net, TemplateKind::HaltAll, ctx);
  EXPECT_EQ(halt.halts.size(), net->node_count());
  const auto reroute = instantiate(*net, TemplateKind::Reroute, ctx);
  const auto fb = net->index_of("foundry-b");
  for (std::size_t e = 0; e < net->edge_count(); ++e)
    if (net->edge_source(e) == fb || net->edge_target(e) == fb) EXPECT_EQ(std::min(reroute.order[e], reroute.ship[e]), 0.0);
}

TEST(Prompt, MentionsShocksAndEstimatedTiers) {
  auto net = default_net();
  const auto ctx = context_at_start(net, default_shock_schedule());
  const auto text = to_prompt(*net, ctx);
  EXPECT_NE(text.find("lithography"), std::string::npos);
  EXPECT_NE(text.find("(estimated)"), std::string::npos);
  EXPECT_EQ(context_features(*net, ctx).size(), context_feature_dim(*net));
  EXPECT_EQ(context_feature_dim(*net), 30u);
}

// --- sampling ---------------------------------------------------------------------------

TEST(SampleCandidates, GreedyLimitReturnsTheArgmaxTemplate) {
  auto net = default_net();
  auto policy = make_parametric_policy(net);
  Rng init = make_rng(4, {});
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index r = 0; r < policy.theta.rows(); ++r)
    for (Eigen::Index c = 0; c < policy.theta.cols(); ++c) policy.theta(r, c) = n(init);
  const auto ctx = context_at_start(net, default_shock_schedule());
  const auto phi = context_features(*net, ctx);
  const Eigen::Map<const Eigen::VectorXd> x(phi.data(), static_cast<Eigen::Index>(phi.size()));
  Eigen::Index best;
  (policy.theta * x).maxCoeff(&best);
  Rng rng = make_rng(5, {});
  for (const auto& c : sample_candidates(policy, ctx, 50, 1e-6, rng))
    EXPECT_EQ(c.action.template_name, to_string(policy.library[static_cast<std::size_t>(best)]));
}

TEST(SampleCandidates, UniformPolicyPassesChiSquare) {
  auto net = default_net();
  const auto policy = make_parametric_policy(net);
  const auto ctx = context_at_start(net, {});
  Rng rng = make_rng(6, {});
  const int draws = 10000;
  std::vector<int> counts(policy.library.size(), 0);
  for (const auto& c : sample_candidates(policy, ctx, draws, 1.0, rng)) ++counts[static_cast<std::size_t>(c.action.template_id)];
  const double k = static_cast<double>(counts.size());
  const double expected = draws / k;
  const double sigma = std::sqrt(draws * (1.0 / k) * (1.0 - 1.0 / k));
  double chi2 = 0.0;
  for (int c : counts) {
    chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LE(std::abs(c - expected), 4.0 * sigma);  // per-cell bound, family-wise p < 1e-3
  }
  EXPECT_LT(chi2, 31.26);  // df = 11, p = 0.999
}

TEST(SampleCandidates, LogProbMatchesReevaluation) {
  auto net = default_net();
  auto policy = make_parametric_policy(net, all_templates(), 0.7);
  Rng init = make_rng(7, {});
  std::normal_distribution<double> n(0.0, 0.5);
  for (Eigen::Index r = 0; r < policy.theta.rows(); ++r)
    for (Eigen::Index c = 0; c < policy.theta.cols(); ++c) policy.theta(r, c) = n(init);
  Rng rng = make_rng(8, {});
  for (int trial = 0; trial < 20; ++trial) {
    const auto ctx = make_context(testsupport::random_observation(*net, rng), std::nullopt, {});
    for (const auto& c : sample_candidates(policy, ctx, 5, 0.7, rng)) {
      EXPECT_NEAR(c.logprob, log_prob(policy, ctx, c.action), 1e-12);
      const auto idx = library_index(policy, c.action.template_name);
      const double ref = -testsupport::reference_loss(policy.theta, context_features(*net, ctx), idx, 1.0, 0.7);
      EXPECT_NEAR(c.logprob, ref, 1e-12);
    }
  }
}

TEST(LogProb, CertaintyAndSymmetry) {
  auto net = default_net();
  const auto ctx = context_at_start(net, {});
  const auto single = make_parametric_policy(net, {TemplateKind::Reroute});
  EXPECT_EQ(log_prob(single, ctx, instantiate(*net, TemplateKind::Reroute, ctx)), 0.0);
  const auto pair = make_parametric_policy(net, {TemplateKind::Reroute, TemplateKind::Hold});
  EXPECT_NEAR(log_prob(pair, ctx, instantiate(*net, TemplateKind::Hold, ctx)), std::log(0.5), 1e-15);
  EXPECT_EQ(code_of([&] { log_prob(pair, ctx, instantiate(*net, TemplateKind::Surge, ctx)); }), ErrorCode::UnknownTemplate);
}

TEST(SampleCandidates, ArgumentErrors) {
  auto net = default_net();
  const auto ctx = context_at_start(net, {});
  Rng rng = make_rng(1, {});
  auto empty = make_parametric_policy(net, {});
  EXPECT_EQ(code_of([&] { sample_candidates(empty, ctx, 3, 1.0, rng); }), ErrorCode::EmptyTemplateLibrary);
  const auto p = make_parametric_policy(net);
  EXPECT_EQ(code_of([&] { sample_candidates(p, ctx, 0, 1.0, rng); }), ErrorCode::ParamOutOfRange);
  EXPECT_EQ(code_of([&] { sample_candidates(p, ctx, 3, 0.0, rng); }), ErrorCode::ParamOutOfRange);
}

TEST(SampleCandidates, ScriptedRules) {
  auto net = default_net();
  Rng rng = make_rng(1, {});
  const auto quiet = context_at_start(net, {});
  const auto shocked = context_at_start(net, default_shock_schedule());
  const auto rule = make_scripted_policy(net, ScriptedRule::HaltOnShock, TemplateKind::Reroute);
  EXPECT_EQ(sample_candidates(rule, quiet, 1, 1.0, rng)[0].action.template_name, "reroute");
  EXPECT_EQ(sample_candidates(rule, shocked, 1, 1.0, rng)[0].action.template_name, "halt_all");
  const auto fixed = make_scripted_policy(net, ScriptedRule::Fixed, TemplateKind::HaltAll);
  for (const auto& c : sample_candidates(fixed, quiet, 3, 1.0, rng)) {
    EXPECT_EQ(c.action.template_name, "halt_all");
    EXPECT_EQ(c.logprob, 0.0);
  }
}

// --- critics -----------------------------------------------------------------------------------

TEST(InternalCritique, CleanPlanScoresFullMarks) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  const auto ctx = context_at_start(net, {});
  const auto a = instantiate(*net, TemplateKind::Reroute, ctx);
  EXPECT_EQ(internal_critique(critic, ctx.observation, a, ctx).score, 100.0);
}

TEST(InternalCritique, SanctionedTradeScoresAtMostFifty) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  const auto ctx = context_at_start(net, {{ShockKind::Sanction, {"foundry-b"}, 1.0, 1, 5, ""}});
  const auto a = instantiate(*net, TemplateKind::IgnoreShocks, ctx);
  const auto v = internal_critique(critic, ctx.observation, a, ctx);
  EXPECT_LE(v.score, 50.0);
  EXPECT_NE(v.feedback.find("sanctioned"), std::string::npos);
}

TEST(InternalCritique, UnjustifiedHaltIsPenalized) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  const auto ctx = context_at_start(net, {});
  const auto a = instantiate(*net, TemplateKind::HaltAll, ctx);
  EXPECT_EQ(internal_critique(critic, ctx.observation, a, ctx).score, 80.0);
}

TEST(Critics, ScoresStayInRangeAndArePure) {
  auto net = default_net();
  auto critic = scripted_critic(net);
  critic.penalties = {90, 90, 90, 90};
  Rng rng = make_rng(9, {});
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto obs = testsupport::random_observation(*net, rng);
    const auto ctx = make_context(obs, std::nullopt, {});
    for (auto k : all_templates()) {
      const auto a = instantiate(*net, k, ctx);
      const auto v = internal_critique(critic, obs, a, ctx);
      EXPECT_GE(v.score, 0.0);
      EXPECT_LE(v.score, 100.0);
      EXPECT_EQ(v.score, internal_critique(critic, obs, a, ctx).score);
      const auto fb = feedback_with(uni(rng), static_cast<int>(6 * (uni(rng) + 1) / 2), net->node_count());
      const auto e = external_assess(critic, obs, a, fb);
      EXPECT_GE(e.score, 0.0);
      EXPECT_LE(e.score, 100.0);
    }
  }
}

TEST(ExternalAssess, AffineEndpoints) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  const auto ctx = context_at_start(net, {});
  const auto a = instantiate(*net, TemplateKind::Hold, ctx);
  EXPECT_EQ(external_assess(critic, ctx.observation, a, feedback_with(1.0, 0, 6)).score, 100.0);
  EXPECT_EQ(external_assess(critic, ctx.observation, a, feedback_with(-1.0, 0, 6)).score, 0.0);
  EXPECT_EQ(external_assess(critic, ctx.observation, a, feedback_with(0.0, 0, 6)).score, 50.0);
  EXPECT_EQ(external_assess(critic, ctx.observation, a, feedback_with(0.0, 2, 6)).score, 40.0);
}

TEST(RetrospectiveScore, PerfectFlatWindowScoresFullMarks) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  HindsightBuffer buffer(3);
  for (int t = 1; t <= 3; ++t) {
    StepRecord rec;
    rec.step = t;
    rec.feedback = feedback_with(1.0, 0, 6);
    buffer.push(rec);
  }
  Observation final_obs;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(retrospective_score(critic, buffer, i, final_obs).score, 100.0);
}

TEST(RetrospectiveScore, RiskExplosionAfterAViolationLowersTheVerdict) {
  auto net = default_net();
  const auto critic = scripted_critic(net);
  HindsightBuffer buffer(2);
  StepRecord first;
  first.step = 1;
  first.feedback = feedback_with(0.6, 1, 6);
  first.feedback.violation[net->index_of("foundry-b")] = true;
  StepRecord second;
  second.step = 2;
  second.feedback = feedback_with(0.6, 0, 6);
  for (auto& s : second.feedback.states_after) s.risk = 90.0;
  buffer.push(first);
  buffer.push(second);
  Observation obs;
  const auto ext = external_assess(critic, obs, first.action, first.feedback).score;
  EXPECT_LT(retrospective_score(critic, buffer, 0, obs).score, ext);
}

TEST(RetrospectiveScore, HindsightFixtureReversesTheImmediateVerdict) {
  const auto text = read_text_file(testsupport::data_dir() / "fixtures" / "hindsight-reversal.json");
  const auto fx = hindsight_fixture_from_json(parse_json_text(text, "fixture"));
  EXPECT_EQ(hindsight_fixture_to_json(fx), hindsight_fixture_to_json(builtin_hindsight_fixture()));
  const auto v = evaluate_hindsight_fixture(fx);
  EXPECT_GT(v.external.score, 70.0);
  EXPECT_LT(v.retrospective.score, 50.0);
  EXPECT_GT(v.rewards.front(), 0.0);
}

TEST(HindsightBuffer, Bounds) {
  HindsightBuffer buffer(2);
  StepRecord r;
  r.step = 1;
  buffer.push(r);
  EXPECT_EQ(code_of([&] { buffer.push(r); }), ErrorCode::IndexOutOfBuffer);  // out of order
  r.step = 2;
  buffer.push(r);
  EXPECT_TRUE(buffer.full());
  r.step = 3;
  EXPECT_EQ(code_of([&] { buffer.push(r); }), ErrorCode::IndexOutOfBuffer);
  EXPECT_EQ(code_of([&] { buffer.at(2); }), ErrorCode::IndexOutOfBuffer);
  const auto critic = scripted_critic(default_net());
  EXPECT_EQ(code_of([&] { retrospective_score(critic, buffer, 5, Observation{}); }), ErrorCode::IndexOutOfBuffer);
  buffer.flush();
  EXPECT_TRUE(buffer.empty());
  EXPECT_EQ(code_of([] { HindsightBuffer(0); }), ErrorCode::ParamOutOfRange);
}

TEST(AttributableNodes, ViolatorsAndTheirDownstream) {
  auto net = default_net();
  StepRecord rec;
  rec.feedback = feedback_with(0.0, 1, 6);
  rec.feedback.violation[net->index_of("foundry-b")] = true;
  std::set<std::string> ids;
  for (auto i : attributable_nodes(*net, rec)) ids.insert(net->node(i).id);
  EXPECT_EQ(ids, (std::set<std::string>{"foundry-b", "integrator-b"}));
}

// --- LLM adapter ------------------------------------------------------------------------

TEST(LlmParsing, ScoreLineIsClampedAndDefaulted) {
  EXPECT_EQ(parse_score("fine\nSCORE: 72").score, 72.0);
  EXPECT_EQ(parse_score("SCORE: 150").score, 100.0);
  EXPECT_EQ(parse_score("SCORE: -5").score, 0.0);
  EXPECT_EQ(parse_score("SCORE: 10\nrevised SCORE: 35.5").score, 35.5);
  const auto none = parse_score("no number here");
  EXPECT_FALSE(none.parsed);
  EXPECT_EQ(none.score, 50.0);
  EXPECT_EQ(parse_template_name("thinking...\nTEMPLATE: reroute"), "reroute");
  EXPECT_FALSE(parse_template_name("TEMPLATE:").has_value());
}

TEST(LlmClient, SendsBearerKeyAndParsesChoices) {
  FakeLlm server([](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    std::vector<std::string> out(static_cast<std::size_t>(body.at("n").get<int>()), "TEMPLATE: reroute");
    res.set_content(reply(out), "application/json");
  });
  ::setenv("REFLPLAN_TEST_LLM_KEY", "sekrit", 1);
  LlmClient client(fast_config(server.endpoint()));
  const auto out = client.complete({{"user", "hi"}}, 0.5, 3);
  ::unsetenv("REFLPLAN_TEST_LLM_KEY");
  EXPECT_EQ(out.size(), 3u);
  EXPECT_EQ(server.last_auth, "Bearer sekrit");
  const auto tr = client.transcript();
  ASSERT_EQ(tr.size(), 1u);
  EXPECT_EQ(tr[0].status, 200);
  EXPECT_NE(tr[0].request.find("\"hi\""), std::string::npos);
}

TEST(LlmClient, ActorAndCriticBackends) {
  FakeLlm server([](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const auto system = body.at("messages").at(0).at("content").get<std::string>();
    if (system.find("SCORE") != std::string::npos)
      res.set_content(reply({"looks risky\nSCORE: 250"}), "application/json");
    else
      res.set_content(reply({"TEMPLATE: multi_source_split", "TEMPLATE: warp_drive"}), "application/json");
  });
  auto net = default_net();
  auto client = std::make_shared<LlmClient>(fast_config(server.endpoint()));
  Policy actor = make_parametric_policy(net);
  actor.backend = ActorBackend::Llm;
  actor.llm = client;
  const auto ctx = context_at_start(net, {});
  Rng rng = make_rng(1, {});
  const auto cands = sample_candidates(actor, ctx, 2, 1.0, rng);
  EXPECT_EQ(cands[0].action.template_name, "multi_source_split");
  EXPECT_EQ(cands[1].action.template_name, "hold");  // unknown name falls back
  EXPECT_FALSE(cands[0].action.free_text.empty());

  Critic critic = scripted_critic(net);
  critic.backend = CriticBackend::Llm;
  critic.llm = client;
  const auto v = internal_critique(critic, ctx.observation, cands[0].action, ctx);
  EXPECT_EQ(v.score, 100.0);
  EXPECT_NE(v.feedback.find("risky"), std::string::npos);
}

TEST(LlmClient, MissingScoreFallsBackToFifty) {
  FakeLlm server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(reply({"I decline to grade."}), "application/json");
  });
  LlmClient client(fast_config(server.endpoint()));
  EXPECT_EQ(client.complete_score({{"user", "x"}}), 50.0);
}

TEST(LlmClient, ClientErrorsAndUnreachableEndpointsAreAdapterUnavailable) {
  FakeLlm server([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("{}", "application/json");
  });
  LlmClient bad_request(fast_config(server.endpoint()));
  EXPECT_EQ(code_of([&] { bad_request.complete({{"user", "x"}}, 0.0, 1); }), ErrorCode::AdapterUnavailable);
  EXPECT_EQ(server.hits.load(), 1);  // 4xx is not retried

  FakeLlm flaky([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  LlmClient retrying(fast_config(flaky.endpoint()));
  EXPECT_EQ(code_of([&] { retrying.complete({{"user", "x"}}, 0.0, 1); }), ErrorCode::AdapterUnavailable);
  EXPECT_EQ(flaky.hits.load(), 2);

  auto cfg = fast_config("http://127.0.0.1:1/v1");
  cfg.timeout_ms = 200;
  LlmClient down(cfg);
  EXPECT_EQ(code_of([&] { down.complete({{"user", "x"}}, 0.0, 1); }), ErrorCode::AdapterUnavailable);
  EXPECT_EQ(down.transcript().size(), 2u);
  EXPECT_EQ(down.take_transcript().size(), 2u);
  EXPECT_TRUE(down.transcript().empty());

  EXPECT_EQ(code_of([] { LlmClient c(LlmConfig{}); }), ErrorCode::AdapterUnavailable);
  EXPECT_EQ(code_of([] { LlmClient c(fast_config("ftp://nowhere")); }), ErrorCode::AdapterUnavailable);
}
