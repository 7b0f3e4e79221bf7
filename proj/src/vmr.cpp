#include "varl/vmr.hpp"

#include <cmath>

namespace varl {

double risk_sensitive_value(std::span<const double> rewards, double eta) {
  if (rewards.empty()) throw ConfigError("risk_sensitive_value of no samples");
  double mx = rewards[0];
  for (double r : rewards) mx = std::max(mx, r);
  double s = 0.0;
  for (double r : rewards) s += std::exp((r - mx) / eta);
  return mx + eta * (std::log(s) -
                     std::log(static_cast<double>(rewards.size())));
}

VmrEstimate estimate_middle_value(
    const VarState& s_m, const PolicyParams& policy,
    const std::function<double(const VarState&)>& terminal_reward,
    const VmrConfig& cfg, const SamplerConfig& sampler, uint64_t run_seed,
    uint64_t prefix_id) {
  if (cfg.k_samples < 1) throw ConfigError("vmr needs at least one sample");
  if (cfg.eta <= 0.0) throw ConfigError("vmr eta must be positive");
  VmrEstimate est;
  est.rewards.reserve(static_cast<size_t>(cfg.k_samples));
  for (int k = 0; k < cfg.k_samples; ++k) {
    Rng rng = make_rng(mix64(run_seed, prefix_id,
                             static_cast<uint64_t>(k)),
                       0x766du);
    Trajectory traj = rollout(policy, s_m, sampler, rng);
    est.rewards.push_back(terminal_reward(traj.final_state()));
    if (cfg.reuse_continuations) est.continuations.push_back(std::move(traj));
  }
  est.value = risk_sensitive_value(est.rewards, cfg.eta);
  return est;
}

BiasReport estimator_bias_report(const SoftControlProblem& problem,
                                 const VarState& s_m, const VmrConfig& cfg,
                                 int trials, uint64_t seed) {
  const size_t m = s_m.step();
  const std::vector<double> exact = middle_value(problem, m);
  BiasReport rep;
  rep.exact_value = exact[s_m.prefix_code()];
  double sum = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const VmrEstimate est = estimate_middle_value(
        s_m, problem.reference, problem.terminal_reward, cfg, SamplerConfig{},
        seed, static_cast<uint64_t>(trial));
    sum += est.value;
  }
  rep.mean_estimate = sum / trials;
  rep.gap = rep.exact_value - rep.mean_estimate;
  return rep;
}

double exact_estimator_mean(std::span<const double> outcome_rewards,
                            std::span<const double> outcome_probs, int k,
                            double eta) {
  std::vector<double> tuple(static_cast<size_t>(k));
  double mean = 0.0;
  auto rec = [&](auto&& self, int depth, double prob) -> void {
    if (prob == 0.0) return;
    if (depth == k) {
      mean += prob * risk_sensitive_value(tuple, eta);
      return;
    }
    for (size_t i = 0; i < outcome_rewards.size(); ++i) {
      tuple[static_cast<size_t>(depth)] = outcome_rewards[i];
      self(self, depth + 1, prob * outcome_probs[i]);
    }
  };
  rec(rec, 0, 1.0);
  return mean;
}

}  // namespace varl
