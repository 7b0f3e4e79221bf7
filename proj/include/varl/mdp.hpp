#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varl/common.hpp"
#include "varl/schedule.hpp"

namespace varl {

using SchedulePtr = std::shared_ptr<const ScaleSchedule>;

inline SchedulePtr make_schedule(std::vector<GridShape> shapes) {
  return std::make_shared<const ScaleSchedule>(std::move(shapes));
}
inline SchedulePtr make_schedule(ScaleSchedule s) {
  return std::make_shared<const ScaleSchedule>(std::move(s));
}

// One grid of token ids, row-major.
struct TokenGrid {
  GridShape shape;
  std::vector<int32_t> tokens;

  int32_t at(int i, int j) const { return tokens[i * shape.w + j]; }
  bool operator==(const TokenGrid&) const = default;
};

// Partial generation state: the grids emitted so far. Keeps a running
// mixed-radix encoding of all tokens in generation order for tabular lookup;
// the encoding is flagged invalid once it would overflow 64 bits.
class VarState {
 public:
  VarState(SchedulePtr schedule, int vocab);

  size_t step() const { return grids_.size(); }
  bool terminal() const { return grids_.size() == schedule_->size(); }
  const std::vector<TokenGrid>& grids() const { return grids_; }
  const TokenGrid& grid(size_t t) const { return grids_[t]; }
  const TokenGrid& last_grid() const { return grids_.back(); }
  const ScaleSchedule& schedule() const { return *schedule_; }
  const SchedulePtr& schedule_ptr() const { return schedule_; }
  int vocab() const { return vocab_; }

  bool code_valid() const { return code_ok_; }
  uint64_t prefix_code() const;

  void push_grid(const TokenGrid& g);
  void pop_grid();

 private:
  struct CodeMark {
    uint64_t code;
    uint64_t radix;
    bool ok;
  };

  SchedulePtr schedule_;
  int vocab_ = 0;
  std::vector<TokenGrid> grids_;
  uint64_t code_ = 0;
  uint64_t radix_ = 1;  // vocab^(tokens so far)
  bool code_ok_ = true;
  std::vector<CodeMark> code_stack_;
};

// Deterministic append transition; the input state is left untouched.
VarState transition(const VarState& state, const TokenGrid& action);

enum class PolicyMode { tabular, contextual };

// Factorized per-site categorical policy. Tabular mode keys a logit table on
// (step, encoded prefix); entries default to zero logits, i.e. uniform.
// Contextual mode maps a fixed-width state feature vector through a per-site
// linear head.
class PolicyParams {
 public:
  // Everything a logit lookup needs about one state, computed once per state.
  struct StateCtx {
    size_t step = 0;
    uint64_t code = 0;           // tabular
    std::vector<double> phi;     // contextual
  };

  // empty until assigned from one of the factories below
  PolicyParams() = default;

  static PolicyParams tabular(SchedulePtr schedule, int vocab,
                              uint64_t state_bound = uint64_t{1} << 20);
  static PolicyParams contextual(SchedulePtr schedule, int vocab);

  PolicyMode mode() const { return mode_; }
  int vocab() const { return vocab_; }
  const ScaleSchedule& schedule() const { return *schedule_; }
  const SchedulePtr& schedule_ptr() const { return schedule_; }
  size_t feature_dim() const { return feature_dim_; }

  StateCtx state_ctx(const VarState& s) const;
  std::vector<double> features(const VarState& s) const;

  std::vector<double> site_logits(const StateCtx& ctx, int site) const;
  std::vector<double> site_logits(const VarState& s, int site) const;
  std::vector<double> site_distribution(const VarState& s, int site) const;
  std::vector<std::vector<double>> step_distributions(const VarState& s) const;

  // tabular storage; table_entry materializes the row (sites*vocab logits)
  std::span<double> table_entry(size_t step, uint64_t code);
  std::vector<std::map<uint64_t, std::vector<double>>>& tables() {
    return tables_;
  }
  const std::vector<std::map<uint64_t, std::vector<double>>>& tables() const {
    return tables_;
  }
  uint64_t states_at(size_t step) const { return state_counts_[step]; }

  // contextual storage; row-major vocab x feature_dim per (step, site)
  std::span<double> site_weights(size_t step, int site);
  std::span<const double> site_weights(size_t step, int site) const;
  std::vector<std::vector<std::vector<double>>>& weights() { return weights_; }
  const std::vector<std::vector<std::vector<double>>>& weights() const {
    return weights_;
  }

  std::string to_json() const;
  static PolicyParams from_json(const std::string& text);

 private:
  PolicyMode mode_ = PolicyMode::tabular;
  SchedulePtr schedule_;
  int vocab_ = 0;
  uint64_t state_bound_ = 0;
  size_t feature_dim_ = 0;
  std::vector<uint64_t> state_counts_;  // tabular: vocab^(tokens before t)
  std::vector<std::map<uint64_t, std::vector<double>>> tables_;
  std::vector<std::vector<std::vector<double>>> weights_;
};

// Rollout-time truncation. Reported per-site log-probs are always under the
// untruncated softmax; the truncated law is kept alongside as a diagnostic.
struct SamplerConfig {
  int top_k = 0;      // 0 disables
  double top_p = 1.0; // 1 disables
  bool truncates() const { return top_k > 0 || top_p < 1.0; }
};

std::vector<double> truncate_distribution(std::span<const double> probs,
                                          const SamplerConfig& cfg);

struct ActionSample {
  TokenGrid grid;
  std::vector<double> logp;        // untruncated, per site
  std::vector<double> logp_trunc;  // under the truncated sampling law
};

ActionSample sample_action(const PolicyParams& params, const VarState& state,
                           const SamplerConfig& sampler, Rng& rng);

struct StepSample {
  TokenGrid grid;
  std::vector<double> logp;
  std::vector<double> logp_trunc;
};

// A sampled segment: `prefix` is the (possibly empty) fixed context, `steps`
// are the grids drawn from it.
struct Trajectory {
  VarState prefix;
  std::vector<StepSample> steps;
  uint64_t seed = 0;

  size_t start_step() const { return prefix.step(); }
  VarState final_state() const;
  double sample_logprob() const;        // stored untruncated log-probs
  double sample_logprob_trunc() const;  // stored truncated log-probs

  std::string to_json() const;
};

Trajectory rollout(const PolicyParams& params, const VarState& from,
                   const SamplerConfig& sampler, Rng& rng,
                   std::optional<size_t> until_step = std::nullopt);

// Sum over sampled steps and sites of log pi(token | state) under `params`.
double trajectory_logprob(const PolicyParams& params, const Trajectory& traj);

// Gradient container mirroring PolicyParams storage.
class PolicyGradient {
 public:
  explicit PolicyGradient(const PolicyParams& shape_of);

  void add_site_logit_grad(const PolicyParams& params,
                           const PolicyParams::StateCtx& ctx, int site,
                           std::span<const double> dlogits, double scale);

  void add(const PolicyGradient& other, double c = 1.0);
  void scale(double c);
  double squared_norm() const;
  std::vector<double> per_step_squared_norm() const;
  bool finite() const;

  std::vector<std::map<uint64_t, std::vector<double>>>& tables() {
    return tables_;
  }
  const std::vector<std::map<uint64_t, std::vector<double>>>& tables() const {
    return tables_;
  }
  std::vector<std::vector<std::vector<double>>>& weights() { return weights_; }
  const std::vector<std::vector<std::vector<double>>>& weights() const {
    return weights_;
  }
  PolicyMode mode() const { return mode_; }

 private:
  PolicyMode mode_;
  int vocab_ = 0;
  size_t sites_v_ = 0;
  std::vector<int> step_sites_;
  std::vector<std::map<uint64_t, std::vector<double>>> tables_;
  std::vector<std::vector<std::vector<double>>> weights_;
};

// d/dtheta of sum_t sum_site weight[t][site] * log pi(token | state).
// weights are indexed over the trajectory's sampled steps.
PolicyGradient logprob_gradient(const PolicyParams& params,
                                const Trajectory& traj,
                                const std::vector<std::vector<double>>& weights);

}  // namespace varl
