#include "varl/oracle.hpp"

#include <cmath>
#include <limits>

namespace varl {

namespace {

// Sizes and per-step layouts shared by every enumeration pass.
struct EnumLayout {
  size_t n_steps = 0;
  std::vector<uint64_t> n_states;   // t = 0..N; V^(tokens before t)
  std::vector<uint64_t> n_actions;  // t = 0..N-1; V^(sites at t)

  uint64_t child(size_t t, uint64_t code, uint64_t action) const {
    return code + action * n_states[t];
  }
};

EnumLayout make_layout(const SoftControlProblem& p) {
  EnumLayout lay;
  lay.n_steps = p.schedule->size();
  lay.n_states.resize(lay.n_steps + 1);
  lay.n_actions.resize(lay.n_steps);
  uint64_t count = 1;
  for (size_t t = 0; t < lay.n_steps; ++t) {
    lay.n_states[t] = count;
    uint64_t actions = 1;
    const int sites = (*p.schedule)[t].sites();
    for (int s = 0; s < sites; ++s) {
      if (__builtin_mul_overflow(actions, static_cast<uint64_t>(p.vocab),
                                 &actions) ||
          actions > p.enumeration_bound)
        throw TooLargeError("action space at step " + std::to_string(t) +
                            " exceeds the enumeration bound");
    }
    lay.n_actions[t] = actions;
    if (__builtin_mul_overflow(count, actions, &count) ||
        count > p.enumeration_bound)
      throw TooLargeError("state space exceeds the enumeration bound");
  }
  lay.n_states[lay.n_steps] = count;
  return lay;
}

// Walks every reachable state once, filling per-(state, action) log-probs for
// `policy` and, when requested, the terminal reward cache.
void build_policy_tables(const SoftControlProblem& p, const EnumLayout& lay,
                         const PolicyParams& policy,
                         std::vector<std::vector<double>>& logp,
                         std::vector<double>* terminal_r) {
  logp.assign(lay.n_steps, {});
  for (size_t t = 0; t < lay.n_steps; ++t)
    logp[t].assign(lay.n_states[t] * lay.n_actions[t], 0.0);
  if (terminal_r)
    terminal_r->assign(lay.n_states[lay.n_steps], 0.0);

  VarState state(p.schedule, p.vocab);

  auto dfs = [&](auto&& self, uint64_t code) -> void {
    const size_t t = state.step();
    if (t == lay.n_steps) {
      if (terminal_r) (*terminal_r)[code] = p.terminal_reward(state);
      return;
    }
    const int sites = (*p.schedule)[t].sites();
    const auto ctx = policy.state_ctx(state);
    std::vector<std::vector<double>> site_logp(static_cast<size_t>(sites));
    for (int k = 0; k < sites; ++k)
      site_logp[static_cast<size_t>(k)] = log_softmax(policy.site_logits(ctx, k));

    TokenGrid grid;  // per recursion level; child steps reshape their own
    grid.shape = (*p.schedule)[t];
    grid.tokens.assign(static_cast<size_t>(sites), 0);
    double* row = logp[t].data() + code * lay.n_actions[t];
    for (uint64_t a = 0; a < lay.n_actions[t]; ++a) {
      uint64_t rest = a;
      double lp = 0.0;
      for (int k = 0; k < sites; ++k) {
        const int digit = static_cast<int>(rest % static_cast<uint64_t>(p.vocab));
        rest /= static_cast<uint64_t>(p.vocab);
        grid.tokens[static_cast<size_t>(k)] = digit;
        lp += site_logp[static_cast<size_t>(k)][static_cast<size_t>(digit)];
      }
      row[a] = lp;
      state.push_grid(grid);
      self(self, lay.child(t, code, a));
      state.pop_grid();
    }
  };
  dfs(dfs, 0);
}

// Backward soft-value recursion over steps [from, N), seeded with
// `terminal_values` at the bottom. Fills value/q/log_pi rows for those steps.
void backward_solve(const EnumLayout& lay, double eta,
                    const std::vector<std::vector<double>>& old_logp,
                    const std::vector<double>& terminal_values, size_t from,
                    std::vector<std::vector<double>>& value,
                    std::vector<std::vector<double>>* q,
                    std::vector<std::vector<double>>& log_pi) {
  value.assign(lay.n_steps + 1, {});
  log_pi.assign(lay.n_steps, {});
  if (q) q->assign(lay.n_steps, {});
  value[lay.n_steps] = terminal_values;
  std::vector<double> lw;
  for (size_t ti = lay.n_steps; ti-- > from;) {
    const uint64_t ns = lay.n_states[ti], na = lay.n_actions[ti];
    value[ti].assign(ns, 0.0);
    log_pi[ti].assign(ns * na, 0.0);
    if (q) (*q)[ti].assign(ns * na, 0.0);
    lw.resize(na);
    for (uint64_t code = 0; code < ns; ++code) {
      const double* old_row = old_logp[ti].data() + code * na;
      for (uint64_t a = 0; a < na; ++a)
        lw[a] = old_row[a] + value[ti + 1][lay.child(ti, code, a)] / eta;
      const double w = logsumexp(lw);
      value[ti][code] = eta * w;
      double* pi_row = log_pi[ti].data() + code * na;
      for (uint64_t a = 0; a < na; ++a) {
        pi_row[a] = lw[a] - w;
        if (q) (*q)[ti][code * na + a] = value[ti + 1][lay.child(ti, code, a)];
      }
    }
  }
}

struct TrajectoryAccumulator {
  double expected_reward = 0.0;
  double kl_pq = 0.0;  // sum p (log p - log q)
};

// Enumerates all trajectories under log tables `lp` (and a comparison set
// `lq`), accumulating E_p[R] and KL(p||q).
void accumulate_trajectories(const EnumLayout& lay,
                             const std::vector<double>& terminal_r,
                             const std::vector<std::vector<double>>& lp,
                             const std::vector<std::vector<double>>& lq,
                             TrajectoryAccumulator& acc) {
  auto dfs = [&](auto&& self, size_t t, uint64_t code, double lp_sum,
                 double lq_sum) -> void {
    if (t == lay.n_steps) {
      const double p = std::exp(lp_sum);
      if (p > 0.0) {
        acc.expected_reward += p * terminal_r[code];
        acc.kl_pq += p * (lp_sum - lq_sum);
      }
      return;
    }
    const uint64_t na = lay.n_actions[t];
    const double* lp_row = lp[t].data() + code * na;
    const double* lq_row = lq[t].data() + code * na;
    for (uint64_t a = 0; a < na; ++a)
      self(self, t + 1, lay.child(t, code, a), lp_sum + lp_row[a],
           lq_sum + lq_row[a]);
  };
  dfs(dfs, 0, 0, 0.0, 0.0);
}

}  // namespace

std::vector<double> SoftSolution::pi_star(size_t t, uint64_t code) const {
  const uint64_t na = n_actions[t];
  std::vector<double> probs(na);
  for (uint64_t a = 0; a < na; ++a)
    probs[a] = std::exp(log_pi[t][code * na + a]);
  return probs;
}

SoftSolution solve_soft(const SoftControlProblem& problem) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);

  SoftSolution sol;
  sol.eta = problem.eta;
  sol.n_states = lay.n_states;
  sol.n_actions = lay.n_actions;
  backward_solve(lay, problem.eta, old_logp, terminal_r, 0, sol.value, &sol.q,
                 sol.log_pi);
  return sol;
}

std::vector<double> middle_value(const SoftControlProblem& problem, size_t m) {
  const EnumLayout lay = make_layout(problem);
  if (m > lay.n_steps) throw OutOfBoundsError("middle step beyond schedule");
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);

  std::vector<double> out(lay.n_states[m], 0.0);
  std::vector<double> terms;
  for (uint64_t code = 0; code < lay.n_states[m]; ++code) {
    terms.clear();
    auto dfs = [&](auto&& self, size_t t, uint64_t c, double lp) -> void {
      if (t == lay.n_steps) {
        terms.push_back(lp + terminal_r[c] / problem.eta);
        return;
      }
      const uint64_t na = lay.n_actions[t];
      const double* row = old_logp[t].data() + c * na;
      for (uint64_t a = 0; a < na; ++a)
        self(self, t + 1, lay.child(t, c, a), lp + row[a]);
    };
    dfs(dfs, m, code, 0.0);
    out[code] = problem.eta * logsumexp(terms);
  }
  return out;
}

InvarianceReport two_stage_check(const SoftControlProblem& problem, size_t m) {
  const EnumLayout lay = make_layout(problem);
  if (m > lay.n_steps) throw OutOfBoundsError("middle step beyond schedule");
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);

  // full-horizon optimum
  std::vector<std::vector<double>> full_value, full_log_pi;
  backward_solve(lay, problem.eta, old_logp, terminal_r, 0, full_value,
                 nullptr, full_log_pi);

  // suffix problems from every s_m, solved independently of the full pass
  std::vector<std::vector<double>> suf_value, suf_log_pi;
  backward_solve(lay, problem.eta, old_logp, terminal_r, m, suf_value, nullptr,
                 suf_log_pi);

  // prefix problem: horizon m, terminal reward V*_m
  std::vector<std::vector<double>> pre_value, pre_log_pi;
  {
    EnumLayout pre_lay = lay;
    pre_lay.n_steps = m;
    pre_lay.n_states.assign(lay.n_states.begin(), lay.n_states.begin() + m + 1);
    pre_lay.n_actions.assign(lay.n_actions.begin(), lay.n_actions.begin() + m);
    backward_solve(pre_lay, problem.eta, old_logp, suf_value[m], 0, pre_value,
                   nullptr, pre_log_pi);
  }

  // concatenate prefix and suffix policies
  std::vector<std::vector<double>> concat(lay.n_steps);
  for (size_t t = 0; t < lay.n_steps; ++t)
    concat[t] = t < m ? pre_log_pi[t] : suf_log_pi[t];

  InvarianceReport rep;
  TrajectoryAccumulator vs_star;
  accumulate_trajectories(lay, terminal_r, concat, full_log_pi, vs_star);
  rep.kl_gap = std::fabs(vs_star.kl_pq);

  TrajectoryAccumulator vs_old;
  accumulate_trajectories(lay, terminal_r, concat, old_logp, vs_old);
  const double j_concat =
      vs_old.expected_reward - problem.eta * vs_old.kl_pq;
  rep.value_gap = std::fabs(j_concat - full_value[0][0]);
  return rep;
}

// ---------------------------------------------------------------------------
// Mean-field projection
// ---------------------------------------------------------------------------

namespace {

double product_kl(std::span<const double> joint,
                  std::span<const int> sizes,
                  const std::vector<std::vector<double>>& q) {
  double kl = 0.0;
  for (size_t cell = 0; cell < joint.size(); ++cell) {
    size_t rest = cell;
    double qc = 1.0;
    for (size_t k = 0; k < sizes.size(); ++k) {
      qc *= q[k][rest % static_cast<size_t>(sizes[k])];
      rest /= static_cast<size_t>(sizes[k]);
    }
    if (qc <= 0.0) continue;
    if (joint[cell] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += qc * (std::log(qc) - std::log(joint[cell]));
  }
  return std::max(kl, 0.0);
}

// Best response for one site given the others: q_i propto exp(E_{q_-i} log p).
std::vector<double> site_best_response(std::span<const double> log_joint,
                                       std::span<const int> sizes,
                                       const std::vector<std::vector<double>>& q,
                                       size_t site) {
  std::vector<double> m(static_cast<size_t>(sizes[site]), 0.0);
  for (size_t cell = 0; cell < log_joint.size(); ++cell) {
    size_t rest = cell;
    double w = 1.0;
    size_t digit_i = 0;
    for (size_t k = 0; k < sizes.size(); ++k) {
      const size_t digit = rest % static_cast<size_t>(sizes[k]);
      rest /= static_cast<size_t>(sizes[k]);
      if (k == site)
        digit_i = digit;
      else
        w *= q[k][digit];
    }
    if (w > 0.0) m[digit_i] += w * log_joint[cell];
  }
  return softmax(m);
}

ProjectionResult mean_field_run(std::span<const double> joint,
                                std::span<const double> log_joint,
                                std::span<const int> sizes,
                                std::vector<std::vector<double>> q,
                                const MeanFieldOptions& opts) {
  ProjectionResult res;
  res.converged = false;
  for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    double max_tv = 0.0;
    for (size_t i = 0; i < sizes.size(); ++i) {
      std::vector<double> next = site_best_response(log_joint, sizes, q, i);
      double tv = 0.0;
      for (size_t v = 0; v < next.size(); ++v)
        tv += std::fabs(next[v] - q[i][v]);
      max_tv = std::max(max_tv, 0.5 * tv);
      q[i] = std::move(next);
    }
    res.sweeps = sweep;
    if (max_tv < opts.tol) {
      res.converged = true;
      break;
    }
  }
  res.kl = product_kl(joint, sizes, q);
  res.stationarity_gap = 0.0;
  for (size_t i = 0; i < sizes.size(); ++i) {
    auto probe = q;
    probe[i] = site_best_response(log_joint, sizes, q, i);
    const double probe_kl = product_kl(joint, sizes, probe);
    if (std::isfinite(res.kl) && std::isfinite(probe_kl))
      res.stationarity_gap =
          std::max(res.stationarity_gap, res.kl - probe_kl);
  }
  res.site_dists = std::move(q);
  return res;
}

}  // namespace

ProjectionResult reverse_kl_project(std::span<const double> joint,
                                    std::span<const int> site_sizes,
                                    const MeanFieldOptions& opts) {
  size_t cells = 1;
  for (int s : site_sizes) cells *= static_cast<size_t>(s);
  if (cells != joint.size())
    throw ShapeMismatchError("joint size does not match site supports");
  if (cells > (size_t{1} << 16))
    throw TooLargeError("joint action space too large to project");

  std::vector<double> log_joint(cells);
  for (size_t c = 0; c < cells; ++c)
    log_joint[c] = joint[c] > 0.0 ? std::max(std::log(joint[c]), kLogZero)
                                  : kLogZero;

  // start 1: product of marginals
  std::vector<std::vector<double>> marginals(site_sizes.size());
  for (size_t k = 0; k < site_sizes.size(); ++k)
    marginals[k].assign(static_cast<size_t>(site_sizes[k]), 0.0);
  for (size_t cell = 0; cell < cells; ++cell) {
    size_t rest = cell;
    for (size_t k = 0; k < site_sizes.size(); ++k) {
      marginals[k][rest % static_cast<size_t>(site_sizes[k])] += joint[cell];
      rest /= static_cast<size_t>(site_sizes[k]);
    }
  }
  ProjectionResult best =
      mean_field_run(joint, log_joint, site_sizes, marginals, opts);

  // start 2: random product, to expose other modes of the mode-seeking loss
  Rng rng = make_rng(opts.seed, 0x6d66u);
  std::vector<std::vector<double>> random_start(site_sizes.size());
  for (size_t k = 0; k < site_sizes.size(); ++k) {
    std::vector<double> logits(static_cast<size_t>(site_sizes[k]));
    for (double& x : logits) x = normal01(rng);
    random_start[k] = softmax(logits);
  }
  ProjectionResult second =
      mean_field_run(joint, log_joint, site_sizes, random_start, opts);

  const bool take_second =
      (second.kl < best.kl) || (!best.converged && second.converged);
  return take_second ? second : best;
}

FactorizedPolicy constrained_optimum(const SoftControlProblem& problem,
                                     const MeanFieldOptions& opts) {
  const SoftSolution sol = solve_soft(problem);
  const size_t n = problem.schedule->size();
  FactorizedPolicy out;
  out.dists.resize(n);
  for (size_t t = 0; t < n; ++t) {
    const int sites = (*problem.schedule)[t].sites();
    const std::vector<int> sizes(static_cast<size_t>(sites), problem.vocab);
    out.dists[t].resize(sol.n_states[t]);
    for (uint64_t code = 0; code < sol.n_states[t]; ++code) {
      const std::vector<double> joint = sol.pi_star(t, code);
      MeanFieldOptions state_opts = opts;
      state_opts.seed = mix64(opts.seed, t, code);
      ProjectionResult proj = reverse_kl_project(joint, sizes, state_opts);
      if (!proj.converged) out.nonconverged_states += 1;
      out.worst_stationarity_gap =
          std::max(out.worst_stationarity_gap, proj.stationarity_gap);
      out.dists[t][code] = std::move(proj.site_dists);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive evaluation
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> joint_logprob_tables(
    const SoftControlProblem& problem, const PolicyParams& policy) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> logp;
  build_policy_tables(problem, lay, policy, logp, nullptr);
  return logp;
}

std::vector<std::vector<double>> joint_logprob_tables(
    const SoftControlProblem& problem, const FactorizedPolicy& policy) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> logp(lay.n_steps);
  for (size_t t = 0; t < lay.n_steps; ++t) {
    const uint64_t na = lay.n_actions[t];
    logp[t].assign(lay.n_states[t] * na, 0.0);
    for (uint64_t code = 0; code < lay.n_states[t]; ++code) {
      const auto& sites = policy.dists[t][code];
      for (uint64_t a = 0; a < na; ++a) {
        uint64_t rest = a;
        double lp = 0.0;
        for (const auto& dist : sites) {
          const size_t digit = rest % dist.size();
          rest /= dist.size();
          lp += dist[digit] > 0.0 ? std::log(dist[digit]) : kLogZero;
        }
        logp[t][code * na + a] = lp;
      }
    }
  }
  return logp;
}

PolicyEval evaluate_policy(const SoftControlProblem& problem,
                           const std::vector<std::vector<double>>& log_tables) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);
  TrajectoryAccumulator acc;
  accumulate_trajectories(lay, terminal_r, log_tables, old_logp, acc);
  PolicyEval eval;
  eval.expected_reward = acc.expected_reward;
  eval.kl_to_reference = acc.kl_pq;
  eval.objective = acc.expected_reward - problem.eta * acc.kl_pq;
  return eval;
}

PolicyEval evaluate_policy(const SoftControlProblem& problem,
                           const PolicyParams& policy) {
  return evaluate_policy(problem, joint_logprob_tables(problem, policy));
}

double trajectory_kl(const SoftControlProblem& problem,
                     const std::vector<std::vector<double>>& log_p,
                     const std::vector<std::vector<double>>& log_q) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);
  TrajectoryAccumulator acc;
  accumulate_trajectories(lay, terminal_r, log_p, log_q, acc);
  return acc.kl_pq;
}

VariationalCheck variational_identity_check(
    const SoftControlProblem& problem, const SoftSolution& solution,
    const std::vector<std::vector<double>>& log_tables) {
  const EnumLayout lay = make_layout(problem);
  std::vector<std::vector<double>> old_logp;
  std::vector<double> terminal_r;
  build_policy_tables(problem, lay, problem.reference, old_logp, &terminal_r);

  const double eta_log_z = solution.log_partition();
  VariationalCheck check;
  check.eta_log_z = eta_log_z;

  // single pass: accumulate E[R], KL to reference, and KL to p* where
  // log p*(tau) = log p_old(tau) + R/eta - log Z
  double e_r = 0.0, kl_old = 0.0, kl_star = 0.0;
  auto dfs = [&](auto&& self, size_t t, uint64_t code, double lp,
                 double lp_old) -> void {
    if (t == lay.n_steps) {
      const double p = std::exp(lp);
      if (p > 0.0) {
        const double lp_star =
            lp_old + terminal_r[code] / problem.eta - eta_log_z / problem.eta;
        e_r += p * terminal_r[code];
        kl_old += p * (lp - lp_old);
        kl_star += p * (lp - lp_star);
      }
      return;
    }
    const uint64_t na = lay.n_actions[t];
    const double* row = log_tables[t].data() + code * na;
    const double* old_row = old_logp[t].data() + code * na;
    for (uint64_t a = 0; a < na; ++a)
      self(self, t + 1, lay.child(t, code, a), lp + row[a], lp_old + old_row[a]);
  };
  dfs(dfs, 0, 0, 0.0, 0.0);

  check.objective = e_r - problem.eta * kl_old;
  check.kl_to_star = kl_star;
  check.gap =
      std::fabs(check.objective - (eta_log_z - problem.eta * kl_star));
  return check;
}

PolicyParams random_tabular_policy(const SchedulePtr& schedule, int vocab,
                                   Rng& rng, double stddev) {
  PolicyParams p = PolicyParams::tabular(schedule, vocab);
  for (size_t t = 0; t < schedule->size(); ++t) {
    for (uint64_t code = 0; code < p.states_at(t); ++code) {
      auto row = p.table_entry(t, code);
      for (double& x : row) x = stddev * normal01(rng);
    }
  }
  return p;
}

std::function<double(const VarState&)> reward_from_table(
    std::vector<double> table) {
  return [table = std::move(table)](const VarState& s) {
    return table[s.prefix_code()];
  };
}

}  // namespace varl
