#pragma once
//
// Experiment orchestration: episode batches on a bounded worker pool, run
// directories, replay analysis and hyperparameter sweeps.
//
// Run directory layout:
//   config.json                 fully resolved configuration
//   episodes/episode-NNNN.jsonl one log per episode
//   checkpoints/                policy per episode, world model when learned
//   metrics.csv signals.csv correlation.csv loss-trajectory.csv
//

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "metrics.hpp"
#include "reflect_loop.hpp"
#include "world_model.hpp"

namespace reflplan {

inline std::uint64_t episode_seed(std::uint64_t master, int episode) {
  return derive_seed(master, {static_cast<std::uint64_t>(episode)});
}

// Profitability of the no-shock static-hold reference run for `seed`.
inline double reference_profit(const ExperimentConfig& config, std::uint64_t seed) {
  ExperimentConfig ref = config;
  ref.baseline = Baseline::StaticHold;
  ref.ablation = {};
  EpisodeOptions opts;
  opts.shocks = std::vector<Shock>{};
  const auto r = run_episode(ref, seed, opts);
  if (r.log.error) throw Error(ErrorCode::InvalidConfig, "reference run failed: " + *r.log.error);
  return profitability(r.log);
}

// Transitions from random-policy episodes, in the feature spaces the learned model uses.
inline std::vector<Transition> collect_transitions(const ExperimentConfig& config, int episodes) {
  const auto net = std::make_shared<const SupplyNetwork>(build_network(config.network));
  ExperimentConfig warm = config;
  warm.baseline = Baseline::Random;
  std::vector<Transition> out;
  for (int w = 0; w < episodes; ++w) {
    const auto r = run_episode(warm, derive_seed(config.seed, {stream::kWarmup, static_cast<std::uint64_t>(w)}));
    for (const auto& s : r.log.steps) {
      Transition t;
      t.obs = observation_features(*net, s.observation);
      t.action = embed_action(*net, s.candidates[s.selected].action);
      t.reward = s.feedback.reward;
      out.push_back(std::move(t));
    }
    // next_obs is the following step's observation; the last step has none.
    for (std::size_t k = out.size() - r.log.steps.size(), n = 0; n < r.log.steps.size(); ++k, ++n) {
      if (n + 1 < r.log.steps.size())
        out[k].next_obs = out[k + 1].obs;
      else
        out[k].next_obs = out[k].obs;
    }
  }
  return out;
}

inline WorldModelParams fit_learned_world_model(const ExperimentConfig& config) {
  const auto net = build_network(config.network);
  auto params = init_world_model(observation_feature_dim(net), action_embedding_dim(net), config.latent_dim,
                                 derive_seed(config.seed, {stream::kEncoder}), false);
  return fit_world_model(collect_transitions(config, config.warmup_episodes), params, config.wm_lambda);
}

struct BatchResult {
  std::vector<EpisodeLog> logs;
  std::vector<Policy> policies;
  std::optional<WorldModelParams> wm_params;
};

// Runs config.episodes episodes. Independent episodes share a worker pool;
// with carry_policy they run in order, each starting from its predecessor's policy.
inline BatchResult run_batch(const ExperimentConfig& config, bool with_baseline_profit = true) {
  validate_config(config);
  BatchResult out;
  const auto n = static_cast<std::size_t>(config.episodes);
  out.logs.resize(n);
  out.policies.resize(n);
  const bool need_wm = config.wm_mode == WorldModelMode::Learned && effective_settings(config).use_world_model;
  if (need_wm) out.wm_params = fit_learned_world_model(config);

  auto run_one = [&](std::size_t e, std::optional<Policy> start) {
    const auto seed = episode_seed(config.seed, static_cast<int>(e));
    EpisodeOptions opts;
    opts.episode = static_cast<int>(e);
    opts.policy = std::move(start);
    opts.wm_params = out.wm_params;
    if (config.llm && (config.actor == ActorBackend::Llm || config.critic == CriticBackend::Llm) &&
        config.baseline == Baseline::Planner)
      opts.llm = std::make_shared<LlmClient>(*config.llm);
    if (with_baseline_profit) opts.p_base = reference_profit(config, seed);
    auto r = run_episode(config, seed, std::move(opts));
    out.logs[e] = std::move(r.log);
    out.policies[e] = std::move(r.policy);
  };

  if (config.carry_policy) {
    std::optional<Policy> carry;
    for (std::size_t e = 0; e < n; ++e) {
      run_one(e, carry);
      carry = out.policies[e];
    }
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::optional<Error> first_error;
  auto worker = [&] {
    for (std::size_t e = next++; e < n; e = next++) {
      try {
        run_one(e, std::nullopt);
      } catch (const Error& err) {
        std::lock_guard lock(err_mutex);
        if (!first_error) first_error = err;
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.workers), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) throw *first_error;
  return out;
}

// --- CSV output ----------------------------------------------------------------------

inline std::string fmt_num(double x) {
  if (std::isnan(x)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& x) { return x ? fmt_num(*x) : ""; }

inline std::string metrics_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "episode,seed,P_sys,RCI,BWI,OR,ARL,Psi,mean_reward,episode_return,steps,updates,collapsed\n";
  for (const auto& m : reports)
    os << m.episode << "," << m.seed << "," << fmt_num(m.p_sys) << "," << fmt_num(m.rci) << "," << fmt_opt(m.bwi)
       << "," << fmt_num(m.operability) << "," << fmt_num(m.arl) << "," << fmt_opt(m.psi) << ","
       << fmt_num(m.mean_reward) << "," << fmt_num(m.episode_return) << "," << m.steps << "," << m.updates << ","
       << (m.collapsed ? 1 : 0) << "\n";
  return os.str();
}

inline std::string signals_csv(const std::vector<EpisodeLog>& logs) {
  std::ostringstream os;
  os << "episode,step";
  for (const auto& n : signal_names()) os << "," << n;
  os << "\n";
  for (const auto& log : logs)
    for (const auto& r : signal_rows(log)) {
      os << log.episode << "," << r.step;
      for (double v : r.values) os << "," << fmt_num(v);
      os << "\n";
    }
  return os.str();
}

// Pooled over every episode; "NA" marks undefined pairs.
inline std::string correlation_csv(const std::vector<EpisodeLog>& logs) {
  std::vector<SignalRow> rows;
  for (const auto& log : logs) {
    auto r = signal_rows(log);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::ostringstream os;
  os << "signal";
  for (const auto& n : signal_names()) os << "," << n;
  os << "\n";
  if (rows.size() < 3) return os.str();
  const auto m = correlation_matrix(rows);
  for (std::size_t a = 0; a < m.names.size(); ++a) {
    os << m.names[a];
    for (std::size_t b = 0; b < m.names.size(); ++b) os << "," << (m.value[a][b] ? fmt_num(*m.value[a][b]) : "NA");
    os << "\n";
  }
  return os.str();
}

inline std::string loss_trajectory_csv(const std::vector<EpisodeLog>& logs) {
  std::ostringstream os;
  os << "episode,update,step,terminal,records,loss_sum,mean_r,grad_norm,theta_norm\n";
  for (const auto& log : logs) {
    int k = 0;
    for (const auto& u : log.updates) {
      if (u.kind != "update") continue;
      double mr = 0.0;
      for (const auto& r : u.records) mr += r.r;
      if (!u.records.empty()) mr /= static_cast<double>(u.records.size());
      os << log.episode << "," << k++ << "," << u.step << "," << (u.terminal ? 1 : 0) << "," << u.records.size()
         << "," << fmt_num(u.loss_sum) << "," << fmt_num(mr) << "," << fmt_num(u.grad_norm) << ","
         << fmt_num(u.theta_norm) << "\n";
    }
  }
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error(ErrorCode::Io, "write failed for '" + path.string() + "'");
}

inline std::string episode_file_name(int episode) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "episode-%04d.jsonl", episode);
  return buf;
}

struct AnalysisSummary {
  std::vector<MetricReport> reports;
  int update_events = 0;
  int failed_episodes = 0;
};

// Writes the four CSVs for `logs` into `dir`.
inline AnalysisSummary write_analysis(const std::filesystem::path& dir, const std::vector<EpisodeLog>& logs,
                                      const SupplyNetwork& net) {
  AnalysisSummary s;
  std::vector<EpisodeLog> complete;
  for (const auto& log : logs) {
    s.update_events += count_updates(log);
    if (!log.terminal) {
      ++s.failed_episodes;
      continue;
    }
    s.reports.push_back(metric_report(log, net));
    complete.push_back(log);
  }
  write_text_file(dir / "metrics.csv", metrics_csv(s.reports));
  write_text_file(dir / "signals.csv", signals_csv(complete));
  write_text_file(dir / "correlation.csv", correlation_csv(complete));
  write_text_file(dir / "loss-trajectory.csv", loss_trajectory_csv(logs));
  return s;
}

inline AnalysisSummary write_run(const std::filesystem::path& dir, const ExperimentConfig& config,
                                 const BatchResult& batch) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "episodes");
  fs::create_directories(dir / "checkpoints");
  write_text_file(dir / "config.json", config_to_json(config).dump(2) + "\n");
  for (std::size_t e = 0; e < batch.logs.size(); ++e) {
    write_text_file(dir / "episodes" / episode_file_name(static_cast<int>(e)), episode_log_to_jsonl(batch.logs[e]));
    char name[32];
    std::snprintf(name, sizeof name, "policy-%04zu.json", e);
    write_text_file(dir / "checkpoints" / name, policy_to_json(batch.policies[e]).dump() + "\n");
  }
  if (batch.wm_params)
    write_text_file(dir / "checkpoints" / "world-model.json", world_model_to_json(*batch.wm_params).dump() + "\n");
  return write_analysis(dir, batch.logs, build_network(config.network));
}

inline std::vector<EpisodeLog> read_episode_logs(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  const auto ep_dir = run_dir / "episodes";
  if (!fs::is_directory(ep_dir)) throw Error(ErrorCode::Io, "no episodes/ directory in '" + run_dir.string() + "'");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(ep_dir))
    if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<EpisodeLog> logs;
  for (const auto& f : files) {
    try {
      logs.push_back(episode_log_from_jsonl(read_text_file(f)));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::CorruptLog) throw;
      std::string msg = e.what();
      const std::string prefix = "CorruptLog: ";
      if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
      throw Error(ErrorCode::CorruptLog, f.filename().string() + ": " + msg);
    }
  }
  return logs;
}

// Regenerates the CSVs from logs and the config snapshot; no simulation.
inline AnalysisSummary analyze_run(const std::filesystem::path& run_dir) {
  const auto config = config_from_json(parse_json_text(read_text_file(run_dir / "config.json"), "config.json"));
  return write_analysis(run_dir, read_episode_logs(run_dir), build_network(config.network));
}

// --- Sweeps ----------------------------------------------------------------------

struct SweepRow {
  std::string param;
  int value = 0;
  int episodes = 0;
  double mean_return = 0.0;
  double mean_step_reward = 0.0;
  double mean_updates = 0.0;
  long long candidate_evaluations = 0;
  double wall_ms = 0.0;
  std::optional<std::string> error;
};

inline void set_sweep_param(ExperimentConfig& c, const std::string& param, int value) {
  if (param == "N")
    c.n_candidates = value;
  else if (param == "K")
    c.buffer_k = value;
  else
    throw Error(ErrorCode::InvalidConfig, "sweep parameter must be N or K");
}

// One cell per value, all on the same episode seeds. A failing cell records its error.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& param,
                                   const std::vector<int>& values) {
  if (values.empty()) throw Error(ErrorCode::InvalidConfig, "sweep needs at least one value");
  if (param != "N" && param != "K") throw Error(ErrorCode::InvalidConfig, "sweep parameter must be N or K");
  std::vector<SweepRow> rows;
  for (int v : values) {
    SweepRow row;
    row.param = param;
    row.value = v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ExperimentConfig c = base;
      set_sweep_param(c, param, v);
      const auto batch = run_batch(c, false);
      for (const auto& log : batch.logs) {
        if (log.error) throw Error(ErrorCode::InvalidConfig, *log.error);
        row.mean_return += episode_return(log);
        row.mean_step_reward += mean_step_reward(log);
        row.mean_updates += count_updates(log);
        for (const auto& s : log.steps) row.candidate_evaluations += static_cast<long long>(s.candidates.size());
      }
      row.episodes = static_cast<int>(batch.logs.size());
      row.mean_return /= row.episodes;
      row.mean_step_reward /= row.episodes;
      row.mean_updates /= row.episodes;
    } catch (const Error& e) {
      row.error = e.what();
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "param,value,episodes,mean_return,mean_step_reward,mean_updates,candidate_evaluations,wall_ms,error\n";
  for (const auto& r : rows)
    os << r.param << "," << r.value << "," << r.episodes << "," << fmt_num(r.mean_return) << ","
       << fmt_num(r.mean_step_reward) << "," << fmt_num(r.mean_updates) << "," << r.candidate_evaluations << ","
       << fmt_num(std::round(r.wall_ms)) << "," << (r.error ? "\"" + *r.error + "\"" : "") << "\n";
  return os.str();
}

}  // namespace reflplan
