// reflplan command-line driver.
//
// Exit codes: 0 ok, 2 usage, 3 config, 4 runtime, 5 corrupt log, 6 io.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <reflplan/reflplan.hpp>

using namespace reflplan;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kConfig = 3, kRuntime = 4, kCorrupt = 5, kIo = 6 };

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::InvalidConfig: return kConfig;
    case ErrorCode::CorruptLog: return kCorrupt;
    case ErrorCode::Io: return kIo;
    default: return kRuntime;
  }
}

struct Overrides {
  std::string config = "semisim-v1";
  std::optional<std::uint64_t> seed;
  std::optional<int> episodes;
  std::optional<int> workers;
  std::string out;
  std::string baseline;
  std::vector<std::string> ablate;
  std::string wm_mode;
  std::string llm_endpoint;
  std::string llm_key_env;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "config file, or semisim-v1");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--episodes", o.episodes, "episode count");
  cmd->add_option("--workers", o.workers, "parallel episodes");
  cmd->add_option("--out", o.out, "output directory (default runs/<timestamp>-<name>)");
  cmd->add_option("--baseline", o.baseline, "planner | halt_llm_standin | random | static_hold");
  cmd->add_option("--wm-mode", o.wm_mode, "oracle | learned");
  cmd->add_option("--llm-endpoint", o.llm_endpoint, "OpenAI-compatible base URL");
  cmd->add_option("--llm-key-env", o.llm_key_env, "environment variable holding the API key");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.episodes) c.episodes = *o.episodes;
  if (o.workers) c.workers = *o.workers;
  if (!o.baseline.empty()) c.baseline = baseline_from_string(o.baseline);
  for (const auto& a : o.ablate) set_ablation(c.ablation, a);
  if (!o.wm_mode.empty()) {
    try {
      c.wm_mode = wm_mode_from_string(o.wm_mode);
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidConfig, e.what());
    }
  }
  if (!o.llm_endpoint.empty() || !o.llm_key_env.empty()) {
    if (!c.llm) c.llm = LlmConfig{};
    if (!o.llm_endpoint.empty()) c.llm->endpoint = o.llm_endpoint;
    if (!o.llm_key_env.empty()) c.llm->api_key_env = o.llm_key_env;
  }
  validate_config(c);
  return c;
}

fs::path output_dir(const Overrides& o, const ExperimentConfig& c) {
  if (!o.out.empty()) return o.out;
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
  return fs::path("runs") / (std::string(stamp) + "-" + c.name);
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create '" + p.string() + "': " + ec.message());
}

void print_summary(const AnalysisSummary& s) {
  double ret = 0.0, rci = 0.0, op = 0.0;
  for (const auto& m : s.reports) {
    ret += m.episode_return;
    rci += m.rci;
    op += m.operability;
  }
  const double n = s.reports.empty() ? 1.0 : static_cast<double>(s.reports.size());
  std::cout << "episodes " << s.reports.size() << "  failed " << s.failed_episodes << "  mean return "
            << fmt_num(ret / n) << "  RCI " << fmt_num(rci / n) << "  OR " << fmt_num(op / n) << "\n";
}

int cmd_run(const Overrides& o) {
  const auto c = resolve(o);
  const auto dir = output_dir(o, c);
  ensure_dir(dir);
  const auto summary = write_run(dir, c, run_batch(c));
  std::cout << dir.string() << "\n";
  print_summary(summary);
  return summary.failed_episodes ? kRuntime : kOk;
}

int cmd_sweep(const Overrides& o, const std::string& param, const std::vector<int>& values) {
  if (values.empty()) throw Error(ErrorCode::InvalidConfig, "--values needs at least one entry");
  const auto c = resolve(o);
  const auto dir = output_dir(o, c);
  ensure_dir(dir);
  write_text_file(dir / "config.json", config_to_json(c).dump(2) + "\n");
  const auto rows = sweep(c, param, values);
  const auto csv = sweep_csv(rows);
  write_text_file(dir / ("sweep-" + param + ".csv"), csv);
  std::cout << csv;
  for (const auto& r : rows)
    if (r.error) return kRuntime;
  return kOk;
}

// Full planner plus each ablation on the same seeds, one run directory per variant.
int cmd_ablate(const Overrides& o) {
  Overrides base = o;
  base.ablate.clear();
  const auto c = resolve(base);
  std::vector<std::string> names = o.ablate;
  if (names.empty()) names = {"no_world_model", "no_retro_rl", "no_internal_reflection"};
  const auto dir = output_dir(o, c);
  ensure_dir(dir);
  std::ostringstream csv;
  csv << "variant,episodes,mean_step_reward,mean_return,RCI,OR,ARL,Psi\n";
  int status = kOk;
  names.insert(names.begin(), "full");
  for (const auto& name : names) {
    ExperimentConfig v = c;
    if (name != "full") set_ablation(v.ablation, name);
    const auto s = write_run(dir / name, v, run_batch(v));
    if (s.failed_episodes) status = kRuntime;
    double msr = 0.0, ret = 0.0, rci = 0.0, op = 0.0, arl = 0.0, psi = 0.0;
    for (const auto& m : s.reports) {
      msr += m.mean_reward;
      ret += m.episode_return;
      rci += m.rci;
      op += m.operability;
      arl += m.arl;
      psi += m.psi.value_or(0.0);
    }
    const double n = s.reports.empty() ? 1.0 : static_cast<double>(s.reports.size());
    csv << name << "," << s.reports.size() << "," << fmt_num(msr / n) << "," << fmt_num(ret / n) << ","
        << fmt_num(rci / n) << "," << fmt_num(op / n) << "," << fmt_num(arl / n) << "," << fmt_num(psi / n) << "\n";
  }
  write_text_file(dir / "ablation.csv", csv.str());
  std::cout << dir.string() << "\n" << csv.str();
  return status;
}

int cmd_analyze(const std::string& run_dir) {
  print_summary(analyze_run(run_dir));
  return kOk;
}

int cmd_validate(const Overrides& o) {
  const auto c = resolve(o);
  std::cout << config_to_json(c).dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reflective planning on a simulated supply network"};
  app.require_subcommand(1);

  Overrides run_o, sweep_o, ablate_o, validate_o;
  auto* run = app.add_subcommand("run", "run episodes and write a run directory");
  add_common(run, run_o);
  run->add_option("--ablate", run_o.ablate, "no_world_model | no_retro_rl | no_internal_reflection");

  std::string param;
  std::vector<int> values;
  auto* sw = app.add_subcommand("sweep", "sweep N or K over a list of values");
  add_common(sw, sweep_o);
  sw->add_option("--ablate", sweep_o.ablate, "ablations applied to every cell");
  sw->add_option("--param", param, "N or K")->required();
  sw->add_option("--values", values, "comma-separated values")->required()->delimiter(',');

  auto* ab = app.add_subcommand("ablate", "full planner against each ablation on paired seeds");
  add_common(ab, ablate_o);
  ab->add_option("--ablate", ablate_o.ablate, "ablations to compare (default all)");

  std::string run_dir;
  auto* an = app.add_subcommand("analyze", "recompute CSVs from a run directory's logs");
  an->add_option("run_dir", run_dir, "run directory")->required();

  auto* vc = app.add_subcommand("validate-config", "load, validate and print a config");
  vc->add_option("--config", validate_o.config, "config file, or semisim-v1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*run) return cmd_run(run_o);
    if (*sw) return cmd_sweep(sweep_o, param, values);
    if (*ab) return cmd_ablate(ablate_o);
    if (*an) return cmd_analyze(run_dir);
    if (*vc) return cmd_validate(validate_o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
