#pragma once
//
// Episode metrics and signal correlations, computed from logs alone.
//
//   P_sys  sum of final cash
//   RCI    mean final compliance
//   BWI    per-echelon Var(orders) / Var(end demand), averaged over echelons
//   OR     fraction of (node, step) pairs with buy + ship > 0
//   ARL    mean post-step risk over nodes and steps
//   Psi    (P_sys / P_base) * (100 - ARL)
//

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "error.hpp"
#include "reflect_loop.hpp"
#include "supply_graph.hpp"

namespace reflplan {

inline void require_terminal(const EpisodeLog& log) {
  if (!log.terminal || log.steps.empty()) throw Error(ErrorCode::IncompleteLog, "episode log is not terminal");
}

inline const std::vector<NodeState>& final_states(const EpisodeLog& log) {
  require_terminal(log);
  return log.steps.back().feedback.states_after;
}

inline double profitability(const std::vector<NodeState>& final) {
  double s = 0.0;
  for (const auto& n : final) s += n.cash;
  return s;
}

inline double profitability(const EpisodeLog& log) { return profitability(final_states(log)); }

inline double compliance(const std::vector<NodeState>& final) {
  if (final.empty()) return 0.0;
  double s = 0.0;
  for (const auto& n : final) s += n.compliance;
  return s / static_cast<double>(final.size());
}

inline double compliance(const EpisodeLog& log) { return compliance(final_states(log)); }

inline double population_variance(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(x.size());
}

// Mean over echelons of Var(orders_e) / Var(demand).
inline double bullwhip(const std::vector<std::vector<double>>& echelon_orders, const std::vector<double>& demand) {
  const double vd = population_variance(demand);
  if (!(vd > 0.0)) throw Error(ErrorCode::DegenerateDemand, "end demand has zero variance");
  if (echelon_orders.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& o : echelon_orders) sum += population_variance(o) / vd;
  return sum / static_cast<double>(echelon_orders.size());
}

// Echelon order series are the summed realized purchases (edge inflow plus
// external buys) of each role tier; demand is the summed sink demand.
inline double bullwhip(const EpisodeLog& log, const SupplyNetwork& net) {
  if (log.steps.empty()) throw Error(ErrorCode::DegenerateDemand, "no demand signal in log");
  std::array<std::vector<double>, 3> orders;
  std::vector<double> demand;
  for (const auto& s : log.steps) {
    std::array<double, 3> tier{0.0, 0.0, 0.0};
    double d = 0.0;
    for (NodeIndex i = 0; i < net.node_count(); ++i) {
      tier[static_cast<std::size_t>(net.node(i).role)] += s.feedback.node_buy.at(i);
      d += s.feedback.demand.at(i);
    }
    for (std::size_t r = 0; r < 3; ++r) orders[r].push_back(tier[r]);
    demand.push_back(d);
  }
  std::vector<std::vector<double>> present;
  for (std::size_t r = 0; r < 3; ++r) {
    bool any = false;
    for (NodeIndex i = 0; i < net.node_count(); ++i) any |= static_cast<std::size_t>(net.node(i).role) == r;
    if (any) present.push_back(orders[r]);
  }
  return bullwhip(present, demand);
}

// activity[t][i]: buy + ship of node i at step t.
inline double operability(const std::vector<std::vector<double>>& activity) {
  std::size_t total = 0, active = 0;
  for (const auto& row : activity)
    for (double x : row) {
      ++total;
      if (x > 0.0) ++active;
    }
  return total == 0 ? 0.0 : static_cast<double>(active) / static_cast<double>(total);
}

inline double operability(const EpisodeLog& log) {
  std::vector<std::vector<double>> activity;
  for (const auto& s : log.steps) {
    std::vector<double> row(s.feedback.node_buy.size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = s.feedback.node_buy[i] + s.feedback.node_ship[i];
    activity.push_back(std::move(row));
  }
  return operability(activity);
}

// risks[t][i] after step t.
inline double avg_risk(const std::vector<std::vector<double>>& risks) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : risks)
    for (double r : row) {
      sum += r;
      ++n;
    }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

inline double avg_risk(const EpisodeLog& log) {
  std::vector<std::vector<double>> risks;
  for (const auto& s : log.steps) risks.push_back(risks_of(s.feedback.states_after));
  return avg_risk(risks);
}

inline double resilience(double p_sys, double p_base, double r_avg) {
  if (p_base == 0.0) throw Error(ErrorCode::ZeroBaseline, "P_base is zero");
  return (p_sys / p_base) * (100.0 - r_avg);
}

inline double mean_step_reward(const EpisodeLog& log) {
  if (log.steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& st : log.steps) s += st.feedback.reward;
  return s / static_cast<double>(log.steps.size());
}

inline double episode_return(const EpisodeLog& log) {
  double s = 0.0;
  for (const auto& st : log.steps) s += st.feedback.reward;
  return s;
}

struct MetricReport {
  int episode = 0;
  std::uint64_t seed = 0;
  double p_sys = 0.0;
  double rci = 0.0;
  std::optional<double> bwi;  // absent when demand is degenerate
  double operability = 0.0;
  double arl = 0.0;
  std::optional<double> psi;  // absent without a nonzero baseline
  double mean_reward = 0.0;
  double episode_return = 0.0;
  int steps = 0;
  int updates = 0;
  bool collapsed = false;
};

inline MetricReport metric_report(const EpisodeLog& log, const SupplyNetwork& net) {
  MetricReport m;
  m.episode = log.episode;
  m.seed = log.seed;
  m.p_sys = profitability(log);
  m.rci = compliance(log);
  try {
    m.bwi = bullwhip(log, net);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateDemand) throw;
  }
  m.operability = operability(log);
  m.arl = avg_risk(log);
  if (log.p_base && *log.p_base != 0.0) m.psi = resilience(m.p_sys, *log.p_base, m.arl);
  m.mean_reward = mean_step_reward(log);
  m.episode_return = episode_return(log);
  m.steps = static_cast<int>(log.steps.size());
  m.updates = count_updates(log);
  m.collapsed = log.collapsed;
  return m;
}

// --- Signals and correlation ----------------------------------------------------------

inline const std::vector<std::string>& signal_names() {
  static const std::vector<std::string> names = {"s_llm", "r_wm", "J", "r_exec", "s_retro", "loss"};
  return names;
}

// Per-step signals of the selected candidate; absent entries are NaN.
struct SignalRow {
  int step = 0;
  std::array<double, 6> values{};
};

inline std::vector<SignalRow> signal_rows(const EpisodeLog& log) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<SignalRow> rows;
  for (const auto& s : log.steps) {
    const auto& c = s.candidates.at(s.selected);
    SignalRow r;
    r.step = s.step;
    r.values = {c.s_llm.value_or(nan), c.r_wm.value_or(nan), c.joint, s.feedback.reward, nan, nan};
    if (!c.s_llm && !c.r_wm) r.values[2] = nan;
    rows.push_back(r);
  }
  for (const auto& u : log.updates)
    for (const auto& rec : u.records)
      for (auto& r : rows)
        if (r.step == rec.step) {
          r.values[4] = rec.s_retro;
          r.values[5] = rec.loss;
        }
  return rows;
}

struct CorrelationMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<std::optional<double>>> value;  // nullopt: undefined (zero variance or too few pairs)
  std::size_t samples = 0;
};

// Pearson correlation over pairs where both entries are present.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0.0, my = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isnan(x[i]) && !std::isnan(y[i])) {
      mx += x[i];
      my += y[i];
      ++n;
    }
  if (n < 2) return std::nullopt;
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isnan(x[i]) && !std::isnan(y[i])) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline CorrelationMatrix correlation_matrix(const std::vector<std::string>& names,
                                           const std::vector<std::vector<double>>& series) {
  if (series.size() != names.size()) throw Error(ErrorCode::LengthMismatch, "one series per signal name");
  std::size_t n = series.empty() ? 0 : series.front().size();
  for (const auto& s : series)
    if (s.size() != n) throw Error(ErrorCode::LengthMismatch, "signal series lengths differ");
  if (n < 3) throw Error(ErrorCode::InsufficientSamples, "need at least 3 scored steps");
  CorrelationMatrix m;
  m.names = names;
  m.samples = n;
  const std::size_t k = names.size();
  m.value.assign(k, std::vector<std::optional<double>>(k));
  for (std::size_t a = 0; a < k; ++a) {
    m.value[a][a] = 1.0;
    for (std::size_t b = a + 1; b < k; ++b) m.value[a][b] = m.value[b][a] = pearson(series[a], series[b]);
  }
  return m;
}

inline CorrelationMatrix correlation_matrix(const std::vector<SignalRow>& rows) {
  std::vector<std::vector<double>> series(signal_names().size());
  for (const auto& r : rows)
    for (std::size_t k = 0; k < series.size(); ++k) series[k].push_back(r.values[k]);
  return correlation_matrix(signal_names(), series);
}

inline CorrelationMatrix correlation_matrix(const EpisodeLog& log) { return correlation_matrix(signal_rows(log)); }

}  // namespace reflplan
