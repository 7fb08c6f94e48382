#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <functional>

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

NetworkSpec two_node_spec() {
  NetworkSpec s;
  s.name = "pair";
  s.nodes = {{"a", Role::Upstream, "a", 2.0, 1.0, 10.0}, {"b", Role::Downstream, "b", 4.0, 2.0, 10.0}};
  s.edges = {{"a", "b", 0.5}};
  return s;
}

}  // namespace

TEST(BuildNetwork, DefaultSpecHasSixNodesAndSevenEdges) {
  const auto net = build_network(semisim_v1_spec());
  EXPECT_EQ(net.node_count(), 6u);
  EXPECT_EQ(net.edge_count(), 7u);
  int up = 0, mid = 0, down = 0;
  for (const auto& n : net.nodes()) {
    up += n.role == Role::Upstream;
    mid += n.role == Role::Midstream;
    down += n.role == Role::Downstream;
  }
  EXPECT_EQ(up, 2);
  EXPECT_EQ(mid, 2);
  EXPECT_EQ(down, 2);
}

TEST(BuildNetwork, EmptySpecIsRejected) {
  NetworkSpec s;
  EXPECT_EQ(code_of([&] { build_network(s); }), ErrorCode::EmptyGraph);
}

TEST(BuildNetwork, WeightAboveOneIsRejected) {
  auto s = two_node_spec();
  s.edges[0].weight = 1.3;
  try {
    build_network(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::WeightOutOfRange);
    EXPECT_NE(std::string(e.what()).find("a->b"), std::string::npos);
  }
}

TEST(BuildNetwork, StructuralErrorsNameTheElement) {
  auto dup = two_node_spec();
  dup.nodes.push_back(dup.nodes[0]);
  EXPECT_EQ(code_of([&] { build_network(dup); }), ErrorCode::DuplicateNode);

  auto dangling = two_node_spec();
  dangling.edges.push_back({"a", "ghost", 0.1});
  try {
    build_network(dangling);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DanglingEdge);
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }

  auto twice = two_node_spec();
  twice.edges.push_back({"a", "b", 0.2});
  EXPECT_EQ(code_of([&] { build_network(twice); }), ErrorCode::DuplicateEdge);

  auto negative = two_node_spec();
  negative.edges[0].weight = -0.1;
  EXPECT_EQ(code_of([&] { build_network(negative); }), ErrorCode::WeightOutOfRange);

  auto cap = two_node_spec();
  cap.nodes[0].capacity = 0.0;
  EXPECT_EQ(code_of([&] { build_network(cap); }), ErrorCode::InvalidNode);

  auto cycle = two_node_spec();
  cycle.edges.push_back({"b", "a", 0.5});
  EXPECT_EQ(code_of([&] { build_network(cycle); }), ErrorCode::InvalidTopology);
}

TEST(Predecessors, SourceHasNone) {
  const auto net = build_network(semisim_v1_spec());
  EXPECT_TRUE(predecessors(net, "equipment").empty());
  EXPECT_TRUE(predecessors(net, "materials").empty());
}

TEST(Predecessors, ReturnsInboundPairsSortedById) {
  NetworkSpec s;
  s.nodes = {{"x", Role::Downstream, "x", 1, 1, 1}, {"b", Role::Upstream, "b", 1, 1, 1}, {"a", Role::Upstream, "a", 1, 1, 1}};
  s.edges = {{"b", "x", 0.2}, {"a", "x", 0.5}};
  const auto p = predecessors(build_network(s), "x");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].id, "a");
  EXPECT_DOUBLE_EQ(p[0].weight, 0.5);
  EXPECT_EQ(p[1].id, "b");
  EXPECT_DOUBLE_EQ(p[1].weight, 0.2);
}

TEST(Predecessors, MatchesEnumeratedSpecEdges) {
  const auto spec = semisim_v1_spec();
  const auto net = build_network(spec);
  for (const auto& n : spec.nodes) {
    std::vector<std::pair<std::string, double>> expected;
    for (const auto& e : spec.edges)
      if (e.to == n.id) expected.emplace_back(e.from, e.weight);
    std::sort(expected.begin(), expected.end());
    std::vector<std::pair<std::string, double>> got;
    for (const auto& p : predecessors(net, n.id)) got.emplace_back(p.id, p.weight);
    EXPECT_EQ(got, expected) << n.id;
  }
}

TEST(Predecessors, UnknownNode) {
  const auto net = build_network(semisim_v1_spec());
  EXPECT_EQ(code_of([&] { predecessors(net, "nowhere"); }), ErrorCode::UnknownNode);
}

TEST(Predecessors, IndependentOfEdgeInsertionOrder) {
  Rng rng = make_rng(3, {});
  for (int trial = 0; trial < 20; ++trial) {
    auto spec = testsupport::random_dag(rng);
    const auto a = build_network(spec);
    std::shuffle(spec.edges.begin(), spec.edges.end(), rng);
    const auto b = build_network(spec);
    for (const auto& n : spec.nodes) {
      const auto pa = predecessors(a, n.id), pb = predecessors(b, n.id);
      ASSERT_EQ(pa.size(), pb.size());
      for (std::size_t k = 0; k < pa.size(); ++k) {
        EXPECT_EQ(pa[k].id, pb[k].id);
        EXPECT_EQ(pa[k].weight, pb[k].weight);
      }
      EXPECT_EQ(predecessors(a, n.id), pa);  // stable across calls
    }
  }
}

TEST(NetworkSpecJson, RoundTripIsIdentity) {
  Rng rng = make_rng(4, {});
  std::vector<NetworkSpec> specs = {semisim_v1_spec(), two_node_spec()};
  for (int k = 0; k < 10; ++k) specs.push_back(testsupport::random_dag(rng));
  for (const auto& s : specs) {
    const auto back = parse_network_spec(serialize_network_spec(s));
    EXPECT_EQ(back, s);
    EXPECT_EQ(build_network(back).spec(), build_network(s).spec());
  }
}

TEST(NetworkSpecJson, MalformedTextIsAConfigError) {
  EXPECT_EQ(code_of([] { parse_network_spec("{\"nodes\": 3"); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { parse_network_spec(R"({"nodes":[{"id":"a","role":"sideways","p_sale":1,"p_cost":1,"capacity":1}]})"); }),
            ErrorCode::InvalidNode);
}

TEST(InitStates, DefaultFeatureMean) {
  EXPECT_DOUBLE_EQ(kDefaultFeatureMean, -0.21);
  EXPECT_DOUBLE_EQ(ExperimentConfig{}.feature_mean, -0.21);
}

TEST(InitStates, EmpiricalFeatureMeanTracksConfiguredMean) {
  const auto net = build_network(semisim_v1_spec());
  for (double mu : {0.0, -0.21, 0.5}) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed)
      for (const auto& f : draw_node_features(net, seed, mu))
        for (double x : f) {
          sum += x;
          ++count;
        }
    ASSERT_GE(count, 64u);
    EXPECT_NEAR(sum / static_cast<double>(count), mu, 0.05);
  }
}

TEST(InitStates, SameSeedGivesBitwiseIdenticalStates) {
  const auto net = build_network(semisim_v1_spec());
  const auto a = init_states(net, 42, kDefaultFeatureMean);
  const auto b = init_states(net, 42, kDefaultFeatureMean);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].inventory), std::bit_cast<std::uint64_t>(b[i].inventory));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].cash), std::bit_cast<std::uint64_t>(b[i].cash));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].compliance), std::bit_cast<std::uint64_t>(b[i].compliance));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].risk), std::bit_cast<std::uint64_t>(b[i].risk));
  }
  EXPECT_EQ(a, b);
  EXPECT_NE(init_states(net, 43, kDefaultFeatureMean), a);
}

TEST(InitStates, StatesLieInTheirRanges) {
  const auto net = build_network(semisim_v1_spec());
  for (double mu : {-5.0, -0.21, 5.0})
    for (const auto& s : init_states(net, 9, mu)) {
      EXPECT_GE(s.inventory, 0.0);
      EXPECT_GE(s.compliance, 0.0);
      EXPECT_LE(s.compliance, 100.0);
      EXPECT_GE(s.risk, 0.0);
      EXPECT_LE(s.risk, 100.0);
    }
  EXPECT_THROW(init_states(net, 1, std::nan("")), Error);
}
