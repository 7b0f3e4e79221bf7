#include "varl/grpo.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "json.hpp"

namespace varl {

namespace {

constexpr uint64_t kStreamSharedPrefix = 0x7370u;
constexpr uint64_t kStreamRollout = 0x726fu;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// TaskSpec
// ---------------------------------------------------------------------------

double TaskSpec::terminal_reward(const VarState& s) const {
  if (!s.terminal())
    throw OutOfBoundsError("terminal reward queried before the final step");
  const Recognition rec = toy_recognize(s.last_grid(), codec);
  return ocr_reward(gt(), rec, reward_cfg).total;
}

std::function<double(const VarState&)> TaskSpec::reward_fn() const {
  return [task = *this](const VarState& s) { return task.terminal_reward(s); };
}

BoolGrid TaskSpec::seed_regions(const TokenGrid& finest) const {
  std::set<char> relevant;
  for (const auto& w : ground_truth)
    for (char c : w) relevant.insert(c);
  BoolGrid g{finest.shape,
             std::vector<uint8_t>(static_cast<size_t>(finest.shape.sites()), 0)};
  for (size_t k = 0; k < finest.tokens.size(); ++k) {
    const int32_t tok = finest.tokens[k];
    if (tok == codec.delimiter_id || tok == codec.blank_id) continue;
    if (tok < 0 || static_cast<size_t>(tok) >= codec.glyphs.size()) continue;
    if (relevant.count(codec.glyphs[static_cast<size_t>(tok)]))
      g.cells[k] = 1;
  }
  return g;
}

// ---------------------------------------------------------------------------
// TrainerConfig
// ---------------------------------------------------------------------------

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::prefix: return "prefix";
    case Phase::suffix: return "suffix";
    case Phase::full: return "full";
  }
  return "?";
}

size_t TrainerConfig::resolved_split(size_t n_steps) const {
  if (split_m != SIZE_MAX) return split_m;
  return (n_steps + 1) / 2;
}

void TrainerConfig::validate(size_t n_steps) const {
  if (updates < 1) throw ConfigError("updates must be >= 1");
  if (group_size < 2) throw ConfigError("group size must be >= 2");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw ConfigError("clip_eps must lie in (0,1)");
  if (prefix_per_suffix < 1)
    throw ConfigError("prefix:suffix ratio must be >= 1");
  if (eta <= 0.0) throw ConfigError("eta must be positive");
  if (advantage_std_floor <= 0.0)
    throw ConfigError("advantage std floor must be positive");
  if (resolved_split(n_steps) > n_steps)
    throw ConfigError("split index beyond the schedule");
}

std::string TrainerConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = mode == TrainMode::vmr ? "vmr" : "vanilla";
  j["updates"] = updates;
  j["group_size"] = group_size;
  j["batch_size"] = batch_size;
  j["clip_eps"] = clip_eps;
  j["kl_coef"] = kl_coef;
  j["eta"] = eta;
  j["split_m"] = split_m == SIZE_MAX ? -1 : static_cast<long long>(split_m);
  j["prefix_per_suffix"] = prefix_per_suffix;
  j["alternation"] = alternation == Alternation::fine ? "fine" : "coarse";
  j["forced_phase"] = forced_phase ? to_string(*forced_phase) : "auto";
  j["panw"] = {{"alpha", panw.alpha}, {"normalize", panw.normalize}};
  j["panw_on_kl"] = panw_on_kl;
  j["vmr"] = {{"eta", vmr.eta},
              {"k_samples", vmr.k_samples},
              {"reuse_continuations", vmr.reuse_continuations}};
  j["sampler"] = {{"top_k", sampler.top_k}, {"top_p", sampler.top_p}};
  j["optimizer"] = {{"learning_rate", optimizer.learning_rate},
                    {"momentum", optimizer.momentum},
                    {"linear_decay", optimizer.linear_decay}};
  j["policy_mode"] =
      policy_mode == PolicyMode::tabular ? "tabular" : "contextual";
  j["tabular_state_bound"] = tabular_state_bound;
  j["use_mask"] = use_mask;
  j["mask_off_factor"] = mask_off_factor;
  j["advantage_std_floor"] = advantage_std_floor;
  j["standardize_advantages"] = standardize_advantages;
  j["kl_reward_coef"] = kl_reward_coef;
  j["refresh_reference"] = refresh_reference;
  j["seed"] = seed;
  j["checkpoint_every"] = checkpoint_every;
  j["checkpoints_keep"] = checkpoints_keep;
  j["run_name"] = run_name;
  return j.dump(2);
}

TrainerConfig TrainerConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainerConfig c;
  auto get = [&](const char* key, auto fallback) {
    using T = decltype(fallback);
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  };
  const std::string mode = get("mode", std::string("vmr"));
  if (mode == "vmr") c.mode = TrainMode::vmr;
  else if (mode == "vanilla") c.mode = TrainMode::vanilla;
  else throw ConfigError("unknown mode: " + mode);
  c.updates = get("updates", c.updates);
  c.group_size = get("group_size", c.group_size);
  c.batch_size = get("batch_size", c.batch_size);
  c.clip_eps = get("clip_eps", c.clip_eps);
  c.kl_coef = get("kl_coef", c.kl_coef);
  c.eta = get("eta", c.eta);
  const long long split = get("split_m", static_cast<long long>(-1));
  c.split_m = split < 0 ? SIZE_MAX : static_cast<size_t>(split);
  c.prefix_per_suffix = get("prefix_per_suffix", c.prefix_per_suffix);
  const std::string alt = get("alternation", std::string("fine"));
  if (alt == "fine") c.alternation = Alternation::fine;
  else if (alt == "coarse") c.alternation = Alternation::coarse;
  else throw ConfigError("unknown alternation: " + alt);
  const std::string forced = get("forced_phase", std::string("auto"));
  if (forced == "prefix") c.forced_phase = Phase::prefix;
  else if (forced == "suffix") c.forced_phase = Phase::suffix;
  else if (forced == "full") c.forced_phase = Phase::full;
  else if (forced != "auto") throw ConfigError("unknown forced phase");
  if (j.contains("panw")) {
    c.panw.alpha = j["panw"].value("alpha", c.panw.alpha);
    c.panw.normalize = j["panw"].value("normalize", c.panw.normalize);
  }
  c.panw_on_kl = get("panw_on_kl", c.panw_on_kl);
  if (j.contains("vmr")) {
    c.vmr.eta = j["vmr"].value("eta", c.vmr.eta);
    c.vmr.k_samples = j["vmr"].value("k_samples", c.vmr.k_samples);
    c.vmr.reuse_continuations =
        j["vmr"].value("reuse_continuations", c.vmr.reuse_continuations);
  }
  if (j.contains("sampler")) {
    c.sampler.top_k = j["sampler"].value("top_k", c.sampler.top_k);
    c.sampler.top_p = j["sampler"].value("top_p", c.sampler.top_p);
  }
  if (j.contains("optimizer")) {
    c.optimizer.learning_rate =
        j["optimizer"].value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.momentum =
        j["optimizer"].value("momentum", c.optimizer.momentum);
    c.optimizer.linear_decay =
        j["optimizer"].value("linear_decay", c.optimizer.linear_decay);
  }
  const std::string pm = get("policy_mode", std::string("tabular"));
  if (pm == "tabular") c.policy_mode = PolicyMode::tabular;
  else if (pm == "contextual") c.policy_mode = PolicyMode::contextual;
  else throw ConfigError("unknown policy mode: " + pm);
  c.tabular_state_bound = get("tabular_state_bound", c.tabular_state_bound);
  c.use_mask = get("use_mask", c.use_mask);
  c.mask_off_factor = get("mask_off_factor", c.mask_off_factor);
  c.advantage_std_floor = get("advantage_std_floor", c.advantage_std_floor);
  c.standardize_advantages =
      get("standardize_advantages", c.standardize_advantages);
  c.kl_reward_coef = get("kl_reward_coef", c.kl_reward_coef);
  c.refresh_reference = get("refresh_reference", c.refresh_reference);
  c.seed = get("seed", c.seed);
  c.checkpoint_every = get("checkpoint_every", c.checkpoint_every);
  c.checkpoints_keep = get("checkpoints_keep", c.checkpoints_keep);
  c.run_name = get("run_name", c.run_name);
  return c;
}

// ---------------------------------------------------------------------------
// Rollout collection
// ---------------------------------------------------------------------------

std::vector<double> group_advantages(std::span<const double> rewards,
                                     double std_floor, bool standardize) {
  const size_t n = rewards.size();
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double denom = 1.0;
  if (standardize) {
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n);
    denom = std::max(std::sqrt(var), std_floor);
  }
  std::vector<double> adv(n);
  for (size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

RolloutGroup collect_group(const TaskSpec& task, const PolicyParams& snapshot,
                           const PolicyParams& reference, Phase phase,
                           const TrainerConfig& cfg, uint64_t update_idx,
                           uint64_t group_idx,
                           const PrefixValueFn& prefix_value) {
  const size_t n = task.schedule->size();
  const size_t m = cfg.resolved_split(n);
  RolloutGroup grp{phase, group_idx, VarState(task.schedule, task.vocab), {}, {}};

  if (phase == Phase::suffix) {
    Rng rng = make_rng(mix64(cfg.seed, update_idx, group_idx),
                       kStreamSharedPrefix);
    const Trajectory pre = rollout(snapshot, grp.shared_prefix, cfg.sampler,
                                   rng, m);
    grp.shared_prefix = pre.final_state();
  }

  const auto reward_fn = task.reward_fn();
  const VarState root(task.schedule, task.vocab);
  const auto shaped = [&](double score, const Trajectory& traj) {
    if (cfg.kl_reward_coef <= 0.0) return score;
    return score - cfg.kl_reward_coef *
                       (traj.sample_logprob() -
                        trajectory_logprob(reference, traj));
  };
  for (int i = 0; i < cfg.group_size; ++i) {
    Rng rng = make_rng(mix64(cfg.seed, update_idx, group_idx,
                             static_cast<uint64_t>(i)),
                       kStreamRollout);
    if (phase == Phase::prefix) {
      Trajectory traj = rollout(snapshot, root, cfg.sampler, rng, m);
      const VarState s_m = traj.final_state();
      const uint64_t prefix_id =
          mix64(update_idx, group_idx, static_cast<uint64_t>(i));
      double value;
      std::optional<MaskPyramid> mask;
      if (prefix_value) {
        value = prefix_value(s_m, prefix_id);
      } else {
        VmrConfig vc = cfg.vmr;
        vc.reuse_continuations = vc.reuse_continuations || cfg.use_mask;
        const VmrEstimate est = estimate_middle_value(
            s_m, snapshot, reward_fn, vc, cfg.sampler, cfg.seed, prefix_id);
        value = est.value;
        for (double r : est.rewards) grp.sampled_terminal_rewards.push_back(r);
        if (cfg.use_mask && !est.continuations.empty()) {
          size_t best = 0;
          for (size_t k = 1; k < est.rewards.size(); ++k)
            if (est.rewards[k] > est.rewards[best]) best = k;
          const VarState fin = est.continuations[best].final_state();
          mask = propagate(*task.schedule, task.seed_regions(fin.last_grid()),
                           "vmr-best-continuation");
        }
      }
      const double score = shaped(value, traj);
      grp.items.push_back(
          {std::move(traj), score, 0.0, value, std::move(mask)});
    } else {
      // suffix groups share s_m; full-horizon groups start at the root
      Trajectory traj = rollout(snapshot, grp.shared_prefix, cfg.sampler, rng);
      const VarState fin = traj.final_state();
      const double reward = reward_fn(fin);
      grp.sampled_terminal_rewards.push_back(reward);
      std::optional<MaskPyramid> mask;
      if (cfg.use_mask)
        mask = propagate(*task.schedule, task.seed_regions(fin.last_grid()),
                         "terminal-grid");
      const double score = shaped(reward, traj);
      grp.items.push_back({std::move(traj), score, 0.0,
                           std::numeric_limits<double>::quiet_NaN(),
                           std::move(mask)});
    }
  }
  return grp;
}

// ---------------------------------------------------------------------------
// Surrogate loss
// ---------------------------------------------------------------------------

SurrogateResult surrogate_loss(const RolloutGroup& group,
                               const PolicyParams& current,
                               const PolicyParams& reference,
                               const TrainerConfig& cfg) {
  SurrogateResult res(current);
  if (group.items.empty()) return res;
  const size_t start = group.items[0].traj.start_step();
  const size_t end = start + group.items[0].traj.steps.size();
  const std::vector<double> panw_w =
      panw_weights(current.schedule(), cfg.panw, start, end);

  const int vocab = current.vocab();
  double loss = 0.0, kl_sum = 0.0, gap_sum = 0.0;
  long active = 0, clipped = 0, visited = 0;
  std::vector<double> dlogits(static_cast<size_t>(vocab));

  for (const auto& item : group.items) {
    const double adv = item.advantage;
    VarState cur = item.traj.prefix;
    for (size_t si = 0; si < item.traj.steps.size(); ++si) {
      const StepSample& step = item.traj.steps[si];
      const size_t t = start + si;
      const auto ctx = current.state_ctx(cur);
      const auto ctx_ref = reference.state_ctx(cur);
      const int sites = current.schedule()[t].sites();
      for (int k = 0; k < sites; ++k) {
        double gate = 1.0;
        if (item.mask)
          gate = item.mask->levels[t].cells[static_cast<size_t>(k)]
                     ? 1.0
                     : cfg.mask_off_factor;
        const double w = panw_w[si] * gate;
        const std::vector<double> logp = log_softmax(current.site_logits(ctx, k));
        const std::vector<double> logq =
            log_softmax(reference.site_logits(ctx_ref, k));
        const int tok = step.grid.tokens[static_cast<size_t>(k)];
        const double lp_new = logp[static_cast<size_t>(tok)];
        const double rho = std::exp(lp_new - step.logp[static_cast<size_t>(k)]);
        if (!std::isfinite(rho))
          throw NonFiniteError("policy ratio diverged at step " +
                               std::to_string(t));
        const double unc = rho * adv;
        const double cl =
            std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        visited += 1;
        gap_sum += std::fabs(lp_new - step.logp_trunc[static_cast<size_t>(k)]);
        if (gate > 0.0) {
          active += 1;
          if (unc > cl) clipped += 1;
        }
        loss += -std::min(unc, cl) * w;

        // exact per-site KL(pi_theta || pi_old) and its logit gradient
        double kl = 0.0;
        std::vector<double> p(static_cast<size_t>(vocab));
        for (int v = 0; v < vocab; ++v) {
          p[static_cast<size_t>(v)] = std::exp(logp[static_cast<size_t>(v)]);
          kl += p[static_cast<size_t>(v)] *
                (logp[static_cast<size_t>(v)] - logq[static_cast<size_t>(v)]);
        }
        kl_sum += kl;
        const double klw = gate * (cfg.panw_on_kl ? panw_w[si] : 1.0);
        loss += cfg.kl_coef * kl * klw;

        const double surr_coeff = (w != 0.0 && unc <= cl) ? -adv * rho * w : 0.0;
        const double kl_coeff = cfg.kl_coef * klw;
        bool any = false;
        for (int v = 0; v < vocab; ++v) {
          double d = 0.0;
          if (surr_coeff != 0.0)
            d += surr_coeff * ((v == tok ? 1.0 : 0.0) - p[static_cast<size_t>(v)]);
          if (kl_coeff != 0.0)
            d += kl_coeff * p[static_cast<size_t>(v)] *
                 (logp[static_cast<size_t>(v)] - logq[static_cast<size_t>(v)] - kl);
          dlogits[static_cast<size_t>(v)] = d;
          any = any || d != 0.0;
        }
        if (any) res.grad.add_site_logit_grad(current, ctx, k, dlogits, 1.0);
      }
      cur.push_grid(step.grid);
    }
  }

  if (active > 0) {
    loss /= static_cast<double>(active);
    res.grad.scale(1.0 / static_cast<double>(active));
  }
  res.loss = loss;
  res.active_sites = active;
  res.mean_kl = visited > 0 ? kl_sum / static_cast<double>(visited) : 0.0;
  res.clipped_fraction =
      active > 0 ? static_cast<double>(clipped) / static_cast<double>(active)
                 : 0.0;
  res.logp_trunc_gap =
      visited > 0 ? gap_sum / static_cast<double>(visited) : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

SgdMomentum::SgdMomentum(const PolicyParams& shape_of, OptimizerConfig cfg)
    : cfg_(cfg), velocity_(shape_of) {}

double SgdMomentum::learning_rate(int update, int total_updates) const {
  if (!cfg_.linear_decay) return cfg_.learning_rate;
  return cfg_.learning_rate *
         (1.0 - static_cast<double>(update - 1) /
                    static_cast<double>(total_updates));
}

void SgdMomentum::apply(PolicyParams& params, const PolicyGradient& grad,
                        double lr) {
  velocity_.scale(cfg_.momentum);
  velocity_.add(grad, 1.0);
  if (params.mode() == PolicyMode::tabular) {
    for (size_t t = 0; t < velocity_.tables().size(); ++t) {
      for (const auto& [code, row] : velocity_.tables()[t]) {
        auto dst = params.table_entry(t, code);
        for (size_t i = 0; i < row.size(); ++i) dst[i] -= lr * row[i];
      }
    }
  } else {
    auto& w = params.weights();
    const auto& v = velocity_.weights();
    for (size_t t = 0; t < w.size(); ++t)
      for (size_t s = 0; s < w[t].size(); ++s)
        for (size_t i = 0; i < w[t][s].size(); ++i)
          w[t][s][i] -= lr * v[t][s][i];
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

const char* kMetricsCsvHeader =
    "update,phase,mean_reward,mean_vmr,loss,kl,clipped_frac,grad_norm";

std::string update_report_csv_row(const UpdateReport& r) {
  std::string row = std::to_string(r.update);
  row += ',';
  row += to_string(r.phase);
  for (double x : {r.mean_reward, r.mean_vmr, r.loss, r.kl, r.clipped_frac,
                   r.grad_norm}) {
    row += ',';
    row += fmt(x);
  }
  return row;
}

double trailing_mean_reward(const std::vector<UpdateReport>& reports,
                            int window) {
  if (reports.empty()) return std::numeric_limits<double>::quiet_NaN();
  const size_t take = std::min(reports.size(), static_cast<size_t>(window));
  double sum = 0.0;
  for (size_t i = reports.size() - take; i < reports.size(); ++i)
    sum += reports[i].mean_reward;
  return sum / static_cast<double>(take);
}

int updates_to_threshold(const std::vector<UpdateReport>& reports,
                         double threshold, int window) {
  for (size_t u = 0; u < reports.size(); ++u) {
    const size_t take = std::min(u + 1, static_cast<size_t>(window));
    double sum = 0.0;
    for (size_t i = u + 1 - take; i <= u; ++i) sum += reports[i].mean_reward;
    if (sum / static_cast<double>(take) >= threshold)
      return reports[u].update;
  }
  return static_cast<int>(reports.size()) + 1;
}

TrainResult train(const TaskSpec& task, const TrainerConfig& cfg,
                  const TrainHooks& hooks) {
  const size_t n = task.schedule->size();
  cfg.validate(n);

  PolicyParams params =
      hooks.initial_params
          ? *hooks.initial_params
          : (cfg.policy_mode == PolicyMode::tabular
                 ? PolicyParams::tabular(task.schedule, task.vocab,
                                         cfg.tabular_state_bound)
                 : PolicyParams::contextual(task.schedule, task.vocab));
  const PolicyParams initial_reference = params;
  SgdMomentum opt(params, cfg.optimizer);

  TrainResult out{params, {}, {}, 0.9 * task.reward_reference, 0, 0.0};
  out.metrics_csv = std::string(kMetricsCsvHeader) + "\n";

  const int cycle = cfg.prefix_per_suffix + 1;
  const int prefix_block = cfg.updates * cfg.prefix_per_suffix / cycle;

  for (int u = 1; u <= cfg.updates; ++u) {
    Phase phase;
    if (cfg.forced_phase) {
      phase = *cfg.forced_phase;
    } else if (cfg.mode == TrainMode::vanilla) {
      phase = Phase::full;
    } else if (cfg.alternation == Alternation::fine) {
      phase = ((u - 1) % cycle) < cfg.prefix_per_suffix ? Phase::prefix
                                                        : Phase::suffix;
    } else {
      phase = u <= prefix_block ? Phase::prefix : Phase::suffix;
    }

    const double lr = opt.learning_rate(u, cfg.updates);
    const PolicyParams snapshot = params;
    const PolicyParams& reference =
        cfg.refresh_reference ? snapshot : initial_reference;

    PolicyGradient grad(params);
    double loss = 0.0, kl = 0.0, clipped = 0.0;
    double reward_sum = 0.0, vmr_sum = 0.0;
    long reward_count = 0, vmr_count = 0;

    for (int g = 0; g < cfg.batch_size; ++g) {
      RolloutGroup grp =
          collect_group(task, snapshot, reference, phase, cfg,
                        static_cast<uint64_t>(u), static_cast<uint64_t>(g),
                        hooks.prefix_value);
      std::vector<double> rewards;
      rewards.reserve(grp.items.size());
      for (const auto& item : grp.items) rewards.push_back(item.reward);
      const std::vector<double> adv =
          group_advantages(rewards, cfg.advantage_std_floor,
                           cfg.standardize_advantages);
      for (size_t i = 0; i < grp.items.size(); ++i)
        grp.items[i].advantage = adv[i];

      const SurrogateResult sr = surrogate_loss(grp, params, reference, cfg);
      const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
      loss += sr.loss * inv_b;
      kl += sr.mean_kl * inv_b;
      clipped += sr.clipped_fraction * inv_b;
      grad.add(sr.grad, inv_b);

      for (double r : grp.sampled_terminal_rewards) {
        reward_sum += r;
        reward_count += 1;
      }
      if (phase == Phase::prefix) {
        for (const auto& item : grp.items) {
          vmr_sum += item.vmr_value;
          vmr_count += 1;
        }
      }
    }

    if (!std::isfinite(loss) || !grad.finite())
      throw NonFiniteError("non-finite loss or gradient at update " +
                           std::to_string(u));
    opt.apply(params, grad, lr);

    UpdateReport rep;
    rep.update = u;
    rep.phase = phase;
    rep.mean_reward = reward_count > 0
                          ? reward_sum / static_cast<double>(reward_count)
                          : std::numeric_limits<double>::quiet_NaN();
    rep.mean_vmr = vmr_count > 0 ? vmr_sum / static_cast<double>(vmr_count)
                                 : std::numeric_limits<double>::quiet_NaN();
    rep.loss = loss;
    rep.kl = kl;
    rep.clipped_frac = clipped;
    const std::vector<double> step_sq = grad.per_step_squared_norm();
    double total_sq = 0.0;
    rep.step_grad_norms.reserve(step_sq.size());
    for (double x : step_sq) {
      rep.step_grad_norms.push_back(std::sqrt(x));
      total_sq += x;
    }
    rep.grad_norm = std::sqrt(total_sq);

    out.metrics_csv += update_report_csv_row(rep);
    out.metrics_csv += '\n';
    out.reports.push_back(std::move(rep));

    if (hooks.on_update) hooks.on_update(out.reports.back());
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
        u % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(u, params);
  }

  out.params = std::move(params);
  out.updates_to_threshold =
      updates_to_threshold(out.reports, out.threshold);
  out.final_trailing_reward = trailing_mean_reward(out.reports);
  return out;
}

}  // namespace varl
