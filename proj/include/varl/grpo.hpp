#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "varl/maskprop.hpp"
#include "varl/mdp.hpp"
#include "varl/textreward.hpp"
#include "varl/vmr.hpp"

namespace varl {

// A desk-scale training task: token pyramid + toy recognizer + OCR reward.
struct TaskSpec {
  std::string name = "task";
  std::string description;
  SchedulePtr schedule;
  int vocab = 8;
  TokenCodec codec;
  std::vector<std::string> ground_truth;
  RewardConfig reward_cfg;
  // certified best achievable terminal reward; anchors the
  // updates-to-threshold metric
  double reward_reference = 2.0;

  GroundTruth gt() const { return GroundTruth{ground_truth}; }
  double terminal_reward(const VarState& s) const;
  std::function<double(const VarState&)> reward_fn() const;
  // finest-grid cells whose decoded glyphs belong to ground-truth words
  BoolGrid seed_regions(const TokenGrid& finest) const;
};

enum class TrainMode { vanilla, vmr };
enum class Phase { prefix, suffix, full };
enum class Alternation { fine, coarse };

const char* to_string(Phase phase);

struct OptimizerConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  bool linear_decay = false;
};

struct TrainerConfig {
  TrainMode mode = TrainMode::vmr;
  int updates = 600;
  int group_size = 16;  // rollouts per group
  int batch_size = 16;  // groups (prompts) per update
  double clip_eps = 0.2;
  double kl_coef = 0.01;
  double eta = 1.0;
  // grids in the prefix segment; SIZE_MAX = middle of the schedule
  size_t split_m = SIZE_MAX;
  int prefix_per_suffix = 3;
  Alternation alternation = Alternation::fine;
  std::optional<Phase> forced_phase;  // overrides alternation when set
  PanwConfig panw;
  bool panw_on_kl = true;
  VmrConfig vmr;
  SamplerConfig sampler;
  OptimizerConfig optimizer;
  PolicyMode policy_mode = PolicyMode::tabular;
  uint64_t tabular_state_bound = uint64_t{1} << 20;
  bool use_mask = false;
  double mask_off_factor = 0.0;
  double advantage_std_floor = 1e-6;
  // false: advantages are centered but not divided by the group std; the
  // update then follows the unscaled objective, which the theory checks need
  bool standardize_advantages = true;
  // when positive, each trajectory's score is shaped to
  // R - coef * (log pi(traj) - log pi_old(traj)), folding the KL penalty into
  // the return so the policy gradient targets the soft objective exactly
  double kl_reward_coef = 0.0;
  bool refresh_reference = true;  // pi_old follows the snapshot every update
  uint64_t seed = 1;
  int checkpoint_every = 50;
  int checkpoints_keep = 3;
  std::string run_name = "run";

  size_t resolved_split(size_t n_steps) const;
  void validate(size_t n_steps) const;

  std::string to_json() const;
  static TrainerConfig from_json(const std::string& text);
};

struct ScoredTrajectory {
  Trajectory traj;
  double reward = 0.0;  // terminal reward, or the VMR value in prefix groups
  double advantage = 0.0;
  double vmr_value = std::numeric_limits<double>::quiet_NaN();
  std::optional<MaskPyramid> mask;
};

struct RolloutGroup {
  Phase phase = Phase::full;
  uint64_t conditioning_id = 0;
  VarState shared_prefix;  // suffix groups: the common s_m
  std::vector<ScoredTrajectory> items;
  std::vector<double> sampled_terminal_rewards;  // everything that hit s_T
};

// Optional scorer replacing the Monte-Carlo VMR in prefix groups
// (e.g. the oracle's exact V*_m in tests).
using PrefixValueFn = std::function<double(const VarState&, uint64_t)>;

RolloutGroup collect_group(const TaskSpec& task, const PolicyParams& snapshot,
                           const PolicyParams& reference, Phase phase,
                           const TrainerConfig& cfg, uint64_t update_idx,
                           uint64_t group_idx,
                           const PrefixValueFn& prefix_value = nullptr);

// (R_i - mean) / max(population std, floor); unstandardized when asked
std::vector<double> group_advantages(std::span<const double> rewards,
                                     double std_floor,
                                     bool standardize = true);

struct SurrogateResult {
  double loss = 0.0;
  PolicyGradient grad;
  double mean_kl = 0.0;
  double clipped_fraction = 0.0;
  long active_sites = 0;
  double logp_trunc_gap = 0.0;  // mean |untruncated - truncated| log-prob

  explicit SurrogateResult(const PolicyParams& shape_of) : grad(shape_of) {}
};

// Clipped group-relative surrogate with exact per-site categorical KL to the
// reference, PANW step weights, and mask gating; normalized by the group's
// active site count.
SurrogateResult surrogate_loss(const RolloutGroup& group,
                               const PolicyParams& current,
                               const PolicyParams& reference,
                               const TrainerConfig& cfg);

// SGD with momentum over the policy's (possibly sparse) parameter set.
class SgdMomentum {
 public:
  explicit SgdMomentum(const PolicyParams& shape_of, OptimizerConfig cfg);
  void apply(PolicyParams& params, const PolicyGradient& grad, double lr);
  double learning_rate(int update, int total_updates) const;

 private:
  OptimizerConfig cfg_;
  PolicyGradient velocity_;
};

struct UpdateReport {
  int update = 0;
  Phase phase = Phase::full;
  double mean_reward = 0.0;  // mean terminal reward seen this update
  double mean_vmr = std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
  double kl = 0.0;
  double clipped_frac = 0.0;
  double grad_norm = 0.0;
  std::vector<double> step_grad_norms;
};

struct TrainHooks {
  PrefixValueFn prefix_value;
  std::function<void(int, const PolicyParams&)> on_checkpoint;
  std::function<void(const UpdateReport&)> on_update;
  std::optional<PolicyParams> initial_params;
};

struct TrainResult {
  PolicyParams params;
  std::vector<UpdateReport> reports;
  std::string metrics_csv;
  double threshold = 0.0;
  int updates_to_threshold = 0;  // cfg.updates + 1 when never reached
  double final_trailing_reward = 0.0;
};

extern const char* kMetricsCsvHeader;
std::string update_report_csv_row(const UpdateReport& r);

TrainResult train(const TaskSpec& task, const TrainerConfig& cfg,
                  const TrainHooks& hooks = {});

// first update whose trailing-`window` mean reward reaches `threshold`;
// n_updates + 1 when never
int updates_to_threshold(const std::vector<UpdateReport>& reports,
                         double threshold, int window = 20);
double trailing_mean_reward(const std::vector<UpdateReport>& reports,
                            int window = 20);

}  // namespace varl
