#pragma once

#include <functional>
#include <span>

#include "varl/mdp.hpp"
#include "varl/oracle.hpp"

namespace varl {

struct VmrConfig {
  double eta = 1.0;
  int k_samples = 2;
  // keep the sampled continuations so a caller may reuse them as suffix
  // rollouts; off by default, reuse correlates prefix rewards with suffix
  // gradients
  bool reuse_continuations = false;
};

// eta * log((1/K) * sum_k exp(r_k / eta)), max-subtracted.
double risk_sensitive_value(std::span<const double> rewards, double eta);

struct VmrEstimate {
  double value = 0.0;
  std::vector<double> rewards;
  std::vector<Trajectory> continuations;  // filled when reuse is requested
};

// Monte-Carlo middle value at s_m: K on-policy continuations to the terminal
// step, reduced by the risk-sensitive estimator. The K rollouts draw from rng
// streams derived from (run_seed, prefix_id, k), so estimates reproduce
// regardless of scheduling.
VmrEstimate estimate_middle_value(
    const VarState& s_m, const PolicyParams& policy,
    const std::function<double(const VarState&)>& terminal_reward,
    const VmrConfig& cfg, const SamplerConfig& sampler, uint64_t run_seed,
    uint64_t prefix_id);

struct BiasReport {
  double mean_estimate = 0.0;
  double exact_value = 0.0;
  double gap = 0.0;  // exact - mean; nonnegative in expectation (Jensen)
};

// Averages the estimator over independent trials at a fixed s_m under the
// reference policy and compares against the enumeration oracle.
BiasReport estimator_bias_report(const SoftControlProblem& problem,
                                 const VarState& s_m, const VmrConfig& cfg,
                                 int trials, uint64_t seed);

// Exact expectation of the K-sample estimator over an enumerated terminal
// reward distribution: sums the risk-sensitive value over all K-tuples.
double exact_estimator_mean(std::span<const double> outcome_rewards,
                            std::span<const double> outcome_probs, int k,
                            double eta);

}  // namespace varl
