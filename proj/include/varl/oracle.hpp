#pragma once

#include <functional>
#include <span>
#include <vector>

#include "varl/mdp.hpp"

namespace varl {

// A fully enumerable KL-regularized control instance: maximize
// E[R(s_T)] - eta * KL(pi || reference) over the schedule's token pyramid.
struct SoftControlProblem {
  SchedulePtr schedule;
  int vocab = 2;
  PolicyParams reference;  // pi_old; zero-logit tabular = uniform
  std::function<double(const VarState&)> terminal_reward;
  double eta = 1.0;
  uint64_t enumeration_bound = uint64_t{1} << 22;

  VarState initial_state() const { return VarState(schedule, vocab); }
};

// Exact solution tables from backward enumeration. Step t holds one row per
// encoded prefix state; actions are encoded in the same mixed-radix order as
// state codes, so child_code = code + action * n_states[t].
struct SoftSolution {
  double eta = 1.0;
  std::vector<uint64_t> n_states;   // t = 0..N (N = terminal count)
  std::vector<uint64_t> n_actions;  // t = 0..N-1
  std::vector<std::vector<double>> value;   // [t][code]; value[N] = rewards
  std::vector<std::vector<double>> q;       // [t][code*A_t + a]
  std::vector<std::vector<double>> log_pi;  // [t][code*A_t + a]

  double log_partition() const { return value[0][0]; }  // eta * log Z
  std::vector<double> pi_star(size_t t, uint64_t code) const;
};

SoftSolution solve_soft(const SoftControlProblem& problem);

// V*_m per state with m grids, by direct forward enumeration of every suffix
// continuation (independent of solve_soft's backward pass). m in [0, N]:
// m = 0 is the log-partition, m = N the terminal rewards.
std::vector<double> middle_value(const SoftControlProblem& problem, size_t m);

struct InvarianceReport {
  double kl_gap = 0.0;     // KL(concatenated || full-horizon optimum)
  double value_gap = 0.0;  // |J(concatenated) - eta log Z|
};

// Solves the suffix problem, the prefix problem with V*_m as its reward,
// concatenates, and measures divergence from the full-horizon optimum.
InvarianceReport two_stage_check(const SoftControlProblem& problem, size_t m);

// ---------------------------------------------------------------------------
// Mean-field reverse-KL projection onto a per-site product family.
// ---------------------------------------------------------------------------

struct MeanFieldOptions {
  double tol = 1e-10;   // max per-site total-variation change per sweep
  int max_sweeps = 10000;
  uint64_t seed = 0;    // stream for the random second start
};

struct ProjectionResult {
  std::vector<std::vector<double>> site_dists;
  double kl = 0.0;                 // KL(q || joint)
  double stationarity_gap = 0.0;   // best single-site improvement still open
  bool converged = true;
  int sweeps = 0;
};

// Coordinate ascent on KL(q || joint) over product distributions q, started
// from the product of marginals and once more from a random product; the
// lower-KL fixed point wins.
ProjectionResult reverse_kl_project(std::span<const double> joint,
                                    std::span<const int> site_sizes,
                                    const MeanFieldOptions& opts = {});

// Per-state projection of the global optimum onto the factorized family.
struct FactorizedPolicy {
  // dists[t][code][site][token]
  std::vector<std::vector<std::vector<std::vector<double>>>> dists;
  double worst_stationarity_gap = 0.0;
  int nonconverged_states = 0;
};

FactorizedPolicy constrained_optimum(const SoftControlProblem& problem,
                                     const MeanFieldOptions& opts = {});

// ---------------------------------------------------------------------------
// Exhaustive policy evaluation
// ---------------------------------------------------------------------------

// Per-(state, action) joint log-probs for a policy, same layout as
// SoftSolution::log_pi.
std::vector<std::vector<double>> joint_logprob_tables(
    const SoftControlProblem& problem, const PolicyParams& policy);
std::vector<std::vector<double>> joint_logprob_tables(
    const SoftControlProblem& problem, const FactorizedPolicy& policy);

struct PolicyEval {
  double expected_reward = 0.0;
  double kl_to_reference = 0.0;
  double objective = 0.0;  // expected_reward - eta * kl_to_reference
};

PolicyEval evaluate_policy(const SoftControlProblem& problem,
                           const std::vector<std::vector<double>>& log_tables);
PolicyEval evaluate_policy(const SoftControlProblem& problem,
                           const PolicyParams& policy);

// KL between the trajectory distributions of two policies given as log tables.
double trajectory_kl(const SoftControlProblem& problem,
                     const std::vector<std::vector<double>>& log_p,
                     const std::vector<std::vector<double>>& log_q);

// |J(pi) - (eta log Z - eta KL(p_pi || p*))|, all terms from trajectory
// enumeration against the solved instance.
struct VariationalCheck {
  double objective = 0.0;
  double eta_log_z = 0.0;
  double kl_to_star = 0.0;
  double gap = 0.0;
};
VariationalCheck variational_identity_check(
    const SoftControlProblem& problem, const SoftSolution& solution,
    const std::vector<std::vector<double>>& log_tables);

// Tabular policy with independent normal logits at every enumerable state.
PolicyParams random_tabular_policy(const SchedulePtr& schedule, int vocab,
                                   Rng& rng, double stddev = 1.0);

// Terminal-reward table indexed by terminal state code, as a reward callback.
std::function<double(const VarState&)> reward_from_table(
    std::vector<double> table);

}  // namespace varl
