#pragma once
// Independent oracles shared by the unit tests and the acceptance binary.
// Nothing here calls the library code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <reflplan/reflplan.hpp>

namespace testsupport {

using reflplan::NetworkSpec;
using reflplan::Rng;

// Random DAG on 2..max_nodes nodes: edges only go from lower to higher index,
// node 0 is always a source and the last node a sink.
inline NetworkSpec random_dag(Rng& rng, int max_nodes = 8) {
  std::uniform_int_distribution<int> count(2, max_nodes);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int n = count(rng);
  NetworkSpec s;
  s.name = "random";
  for (int i = 0; i < n; ++i) {
    const auto role = i == 0 ? reflplan::Role::Upstream
                             : (i == n - 1 ? reflplan::Role::Downstream : reflplan::Role::Midstream);
    s.nodes.push_back({"n" + std::to_string(i), role, "node", 10.0, 5.0, 10.0});
  }
  const double density = uni(rng);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (uni(rng) < density) s.edges.push_back({"n" + std::to_string(i), "n" + std::to_string(j), uni(rng)});
  // Shuffle so edge order differs from node order.
  std::shuffle(s.edges.begin(), s.edges.end(), rng);
  return s;
}

// Direct evaluation of the threshold contagion rule over the raw edge list:
// R'_i = clamp((1-g) R_i + sum over edges j->i of w * max(0, R_j - tau), 0, 100).
inline std::vector<double> brute_force_risk(const NetworkSpec& spec, const std::vector<double>& r, double gamma,
                                            double tau) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) idx[spec.nodes[i].id] = i;
  std::vector<double> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    double inflow = 0.0;
    for (const auto& e : spec.edges) {
      if (idx.at(e.to) != i) continue;
      const double excess = r[idx.at(e.from)] - tau;
      if (excess > 0.0) inflow += e.weight * excess;
    }
    double v = (1.0 - gamma) * r[i] + inflow;
    if (v < 0.0) v = 0.0;
    if (v > 100.0) v = 100.0;
    out[i] = v;
  }
  return out;
}

// -r * log softmax(theta phi / T)[a], written out with plain loops.
inline double reference_loss(const Eigen::MatrixXd& theta, const std::vector<double>& phi, std::size_t a, double r,
                             double temperature) {
  std::vector<double> logits(static_cast<std::size_t>(theta.rows()), 0.0);
  for (Eigen::Index k = 0; k < theta.rows(); ++k) {
    double s = 0.0;
    for (Eigen::Index d = 0; d < theta.cols(); ++d) s += theta(k, d) * phi[static_cast<std::size_t>(d)];
    logits[static_cast<std::size_t>(k)] = s / temperature;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return -r * (logits[a] - m - std::log(z));
}

// Observation with random node states, a random subset of the default shocks and a random step.
inline reflplan::Observation random_observation(const reflplan::SupplyNetwork& net, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  reflplan::Observation o;
  o.t_max = 30;
  o.step = 1 + static_cast<int>(uni(rng) * 30.0) % 30;
  for (std::size_t i = 0; i < net.node_count(); ++i) {
    reflplan::NodeState s;
    s.inventory = 100.0 * uni(rng);
    s.cash = 20000.0 * (uni(rng) - 0.3);
    s.compliance = 100.0 * uni(rng);
    s.risk = 100.0 * uni(rng);
    o.nodes.push_back(s);
    o.exact.push_back(true);
    o.last_demand.push_back(net.is_sink(i) ? 30.0 * uni(rng) : 0.0);
    o.last_external.push_back(net.is_source(i) ? 30.0 * uni(rng) : 0.0);
  }
  for (std::size_t e = 0; e < net.edge_count(); ++e) o.last_flows.push_back(20.0 * uni(rng));
  for (const auto& s : reflplan::default_shock_schedule())
    if (uni(rng) < 0.5) o.shocks.push_back(s);
  return o;
}

inline std::filesystem::path data_dir() { return REFLPLAN_DATA_DIR; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("reflplan-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
