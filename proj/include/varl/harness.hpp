#pragma once

#include <string>
#include <vector>

#include "varl/grpo.hpp"
#include "varl/oracle.hpp"

namespace varl {

// Canonical toy task: spell one three-letter word on a [(1,1),(2,2),(4,4)]
// pyramid with an 8-token codec (six letters, delimiter, blank).
TaskSpec spell_task();

TaskSpec task_from_json(const std::string& text);
std::string task_to_json(const TaskSpec& task);
TaskSpec resolve_task(const std::string& name_or_json);

// runs root: $VARL_RUNS_DIR or ./runs
std::string runs_root();

struct RunRecord {
  std::string dir;  // empty when not persisted
  TrainResult result;
};

// Executes one training run; when persist is true writes
// <root>/<run_name>/<timestamp>-<seed>/{config.json,metrics.csv,params.json,
// report.json} plus rolling checkpoints.
RunRecord execute_run(const TaskSpec& task, const TrainerConfig& cfg,
                      const std::string& root, bool persist,
                      const TrainHooks& hooks = {});

// Reads back a persisted run's config for bit-identical re-execution.
struct RunConfig {
  TaskSpec task;
  TrainerConfig trainer;
};
RunConfig load_run_config(const std::string& run_dir);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepSpec {
  std::string name = "sweep";
  TaskSpec task;
  TrainerConfig base;
  std::string axis;                 // m | alpha | k_samples | alternation | mode
  std::vector<std::string> values;  // parsed per axis
  int seeds_per_cell = 3;
  uint64_t first_seed = 1;

  static SweepSpec from_json(const std::string& text);
};

void apply_axis_value(TrainerConfig& cfg, const std::string& axis,
                      const std::string& value);

struct SweepCell {
  std::string value;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double final_reward = 0.0;
  int updates_to_threshold = 0;
  std::string run_dir;
};

struct SweepReport {
  std::vector<SweepCell> cells;
  std::string table_csv;  // axis value x aggregated metrics
};

SweepReport run_sweep(const SweepSpec& spec, const std::string& root,
                      bool persist);

double median(std::vector<double> xs);

// ---------------------------------------------------------------------------
// Theory verification
// ---------------------------------------------------------------------------

struct ProblemSuiteSpec {
  std::vector<GridShape> schedule = {{1, 1}, {2, 2}};
  int vocab = 2;
  std::vector<double> etas = {1.0};
  int problems = 20;
  int policies = 100;  // random policies per problem for the identity check
  uint64_t seed = 7;
  double reward_lo = -2.0;
  double reward_hi = 2.0;
  bool random_reference = true;  // false: uniform pi_old

  static ProblemSuiteSpec from_json(const std::string& text);
};

SoftControlProblem random_problem(const ProblemSuiteSpec& spec,
                                  uint64_t index);

struct VerifyRow {
  std::string property;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerificationReport {
  std::vector<VerifyRow> rows;
  bool all_pass = true;
  std::string to_json() const;
  std::string to_text() const;
};

// solve_soft sanity, two_stage_check over every m, the variational identity
// over random policies, and reverse-KL stationarity certificates.
VerificationReport verify_theory(const ProblemSuiteSpec& spec);

// ---------------------------------------------------------------------------
// Curves (reward-vs-update series for run comparisons)
// ---------------------------------------------------------------------------

struct CurveSeries {
  std::string label;
  std::vector<std::pair<int, double>> points;  // (update, mean_reward)
};

std::vector<CurveSeries> load_curves(const std::vector<std::string>& run_dirs);
std::string curves_csv(const std::vector<CurveSeries>& series);
std::string curves_svg(const std::vector<CurveSeries>& series, int width = 720,
                       int height = 400);

}  // namespace varl
