// varl: desk-scale RL laboratory for next-scale token-pyramid generation.
//
// Subcommands:
//   train        one training run from a JSON config
//   sweep        seeded ablation sweep from a JSON spec
//   verify       brute-force theory checks on enumerable problems
//   reward score OCR-style reward over JSONL records
//   curves       reward-vs-update CSV + SVG from run directories

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "varl/harness.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw varl::ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw varl::ConfigError("cannot write " + path);
  out << content;
}

int cmd_train(const std::string& config_path, const std::string& mode,
              long long seed, bool no_persist) {
  varl::TaskSpec task = varl::spell_task();
  varl::TrainerConfig cfg;
  if (!config_path.empty()) {
    nlohmann::json j = nlohmann::json::parse(read_file(config_path));
    if (j.contains("task")) {
      task = j["task"].is_object() ? varl::task_from_json(j["task"].dump())
                                   : varl::resolve_task(
                                         j["task"].get<std::string>());
    }
    cfg = varl::TrainerConfig::from_json(
        j.contains("trainer") ? j["trainer"].dump() : j.dump());
  }
  if (mode == "vanilla") cfg.mode = varl::TrainMode::vanilla;
  else if (mode == "vmr") cfg.mode = varl::TrainMode::vmr;
  else if (!mode.empty()) throw varl::ConfigError("unknown mode: " + mode);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);

  const varl::RunRecord rec =
      varl::execute_run(task, cfg, varl::runs_root(), !no_persist);
  const auto& res = rec.result;
  std::cout << "task " << task.name << ", mode "
            << (cfg.mode == varl::TrainMode::vmr ? "vmr" : "vanilla")
            << ", seed " << cfg.seed << "\n";
  std::cout << "final trailing reward " << res.final_trailing_reward
            << " (threshold " << res.threshold << ", reached at update "
            << res.updates_to_threshold << " of " << cfg.updates << ")\n";
  if (!rec.dir.empty()) std::cout << "run dir: " << rec.dir << "\n";
  return 0;
}

int cmd_sweep(const std::string& spec_path, bool no_persist) {
  const varl::SweepSpec spec = varl::SweepSpec::from_json(read_file(spec_path));
  const varl::SweepReport report =
      varl::run_sweep(spec, varl::runs_root(), !no_persist);
  std::cout << report.table_csv;
  for (const auto& cell : report.cells)
    if (!cell.ok)
      std::cerr << "cell " << cell.value << " seed " << cell.seed
                << " failed: " << cell.error << "\n";
  return 0;
}

int cmd_verify(const std::string& problem_path, const std::string& out_path) {
  varl::ProblemSuiteSpec spec;
  if (!problem_path.empty())
    spec = varl::ProblemSuiteSpec::from_json(read_file(problem_path));
  const varl::VerificationReport report = varl::verify_theory(spec);
  std::cout << report.to_text();
  if (!out_path.empty()) write_file(out_path, report.to_json() + "\n");
  return report.all_pass ? 0 : 1;
}

int cmd_reward_score(const std::string& in_path, const std::string& out_path,
                     double lambda, double epsilon) {
  std::istream* in = &std::cin;
  std::ifstream file;
  if (!in_path.empty() && in_path != "-") {
    file.open(in_path, std::ios::binary);
    if (!file) throw varl::ConfigError("cannot read " + in_path);
    in = &file;
  }
  std::ostream* out = &std::cout;
  std::ofstream out_file;
  if (!out_path.empty() && out_path != "-") {
    out_file.open(out_path, std::ios::binary);
    if (!out_file) throw varl::ConfigError("cannot write " + out_path);
    out = &out_file;
  }
  varl::RewardConfig cfg{lambda, epsilon};
  std::string line;
  while (std::getline(*in, line)) {
    if (line.empty()) continue;
    const varl::RewardReport rep = varl::score_record_json(line, cfg);
    *out << varl::reward_report_to_json(rep) << "\n";
  }
  return 0;
}

int cmd_curves(const std::vector<std::string>& run_dirs,
               const std::string& out_csv, const std::string& out_svg) {
  const auto series = varl::load_curves(run_dirs);
  if (!out_csv.empty()) write_file(out_csv, varl::curves_csv(series));
  if (!out_svg.empty()) write_file(out_svg, varl::curves_svg(series));
  if (out_csv.empty() && out_svg.empty()) std::cout << varl::curves_csv(series);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale RL laboratory for next-scale generation"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "run one training job");
  std::string train_config, train_mode;
  long long train_seed = -1;
  bool train_no_persist = false;
  train->add_option("--config", train_config, "JSON config file");
  train->add_option("--mode", train_mode, "vanilla|vmr (overrides config)");
  train->add_option("--seed", train_seed, "seed (overrides config)");
  train->add_flag("--no-persist", train_no_persist, "skip writing a run dir");

  auto* sweep = app.add_subcommand("sweep", "run an ablation sweep");
  std::string sweep_spec;
  bool sweep_no_persist = false;
  sweep->add_option("--spec", sweep_spec, "JSON sweep spec")->required();
  sweep->add_flag("--no-persist", sweep_no_persist, "skip writing run dirs");

  auto* verify = app.add_subcommand("verify", "brute-force theory checks");
  std::string verify_problem, verify_out;
  verify->add_option("--problem", verify_problem, "JSON problem-suite spec");
  verify->add_option("--out", verify_out, "write the JSON report here");

  auto* reward = app.add_subcommand("reward", "reward utilities");
  auto* score = reward->add_subcommand("score", "score JSONL records");
  std::string score_in, score_out;
  double score_lambda = 0.6, score_eps = 1e-6;
  score->add_option("--in", score_in, "input JSONL ('-' = stdin)");
  score->add_option("--out", score_out, "output JSONL ('-' = stdout)");
  score->add_option("--lambda", score_lambda, "length penalty weight");
  score->add_option("--epsilon", score_eps, "edit-score epsilon");
  reward->require_subcommand(1);

  auto* curves = app.add_subcommand("curves", "export reward-vs-update curves");
  std::vector<std::string> curve_dirs;
  std::string curves_csv_path, curves_svg_path;
  curves->add_option("--runs", curve_dirs, "run directories")->required();
  curves->add_option("--out-csv", curves_csv_path, "CSV output path");
  curves->add_option("--out-svg", curves_svg_path, "SVG output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(train_config, train_mode, train_seed, train_no_persist);
    if (sweep->parsed()) return cmd_sweep(sweep_spec, sweep_no_persist);
    if (verify->parsed()) return cmd_verify(verify_problem, verify_out);
    if (reward->parsed())
      return cmd_reward_score(score_in, score_out, score_lambda, score_eps);
    if (curves->parsed())
      return cmd_curves(curve_dirs, curves_csv_path, curves_svg_path);
  } catch (const varl::NonFiniteError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 2;
  } catch (const varl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
