#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "varl/grpo.hpp"
#include "varl/harness.hpp"

using namespace varl;

namespace {

// two tokens on a (2,1) grid after a 1x1 step; vocabulary "a","b",delim
TaskSpec mini_text_task() {
  TaskSpec task;
  task.name = "mini";
  task.schedule = make_schedule({{1, 1}, {2, 1}});
  task.vocab = 3;
  task.codec.glyphs = "ab";
  task.codec.delimiter_id = 2;
  task.codec.blank_id = -1;
  task.ground_truth = {"ab"};
  task.reward_reference = 2.0;
  return task;
}

// one-site bandit: token 0 renders the ground truth, token 1 is a delimiter
TaskSpec bandit_task() {
  TaskSpec task;
  task.name = "bandit";
  task.schedule = make_schedule({{1, 1}});
  task.vocab = 2;
  task.codec.glyphs = "a";
  task.codec.delimiter_id = 1;
  task.ground_truth = {"a"};
  task.reward_reference = 2.0;
  return task;
}

SoftControlProblem problem_for(const TaskSpec& task, double eta) {
  SoftControlProblem prob;
  prob.schedule = task.schedule;
  prob.vocab = task.vocab;
  prob.eta = eta;
  prob.reference = PolicyParams::tabular(task.schedule, task.vocab);
  prob.terminal_reward = task.reward_fn();
  return prob;
}

}  // namespace

TEST_CASE("group advantages") {
  SUBCASE("equal rewards vanish") {
    const auto adv = group_advantages(std::vector<double>{1.3, 1.3, 1.3}, 1e-6);
    for (double a : adv) CHECK(a == 0.0);
  }
  SUBCASE("two-point group standardizes to +-1") {
    const auto adv = group_advantages(std::vector<double>{0.0, 1.0}, 1e-6);
    CHECK(adv[0] == doctest::Approx(-1.0));
    CHECK(adv[1] == doctest::Approx(1.0));
  }
  SUBCASE("three-point group") {
    const auto adv = group_advantages(std::vector<double>{1.0, 2.0, 3.0}, 1e-6);
    CHECK(adv[0] == doctest::Approx(-std::sqrt(1.5)).epsilon(1e-12));
    CHECK(adv[1] == doctest::Approx(0.0));
    CHECK(adv[2] == doctest::Approx(std::sqrt(1.5)).epsilon(1e-12));
  }
  SUBCASE("zero mean and shift invariance") {
    Rng rng = make_rng(301);
    for (int it = 0; it < 100; ++it) {
      std::vector<double> rewards(static_cast<size_t>(uniform_int(rng, 2, 16)));
      for (double& r : rewards) r = uniform_in(rng, -2.0, 2.0);
      const auto adv = group_advantages(rewards, 1e-6);
      double sum = 0.0;
      for (double a : adv) sum += a;
      CHECK(std::fabs(sum) <= 1e-9);
      std::vector<double> shifted = rewards;
      for (double& r : shifted) r += 0.77;
      const auto adv2 = group_advantages(shifted, 1e-6);
      for (size_t i = 0; i < adv.size(); ++i)
        CHECK(adv2[i] == doctest::Approx(adv[i]).epsilon(1e-9));
    }
  }
  SUBCASE("centered mode skips the standardization") {
    const auto adv = group_advantages(std::vector<double>{0.0, 1.0}, 1e-6,
                                      false);
    CHECK(adv[0] == doctest::Approx(-0.5));
    CHECK(adv[1] == doctest::Approx(0.5));
  }
}

TEST_CASE("collect_group") {
  const TaskSpec task = mini_text_task();
  TrainerConfig cfg;
  cfg.group_size = 4;
  cfg.batch_size = 1;
  cfg.split_m = 1;
  cfg.seed = 5;
  const PolicyParams uniform = PolicyParams::tabular(task.schedule, task.vocab);

  SUBCASE("same seed, same group") {
    const RolloutGroup a =
        collect_group(task, uniform, uniform, Phase::full, cfg, 3, 0);
    const RolloutGroup b =
        collect_group(task, uniform, uniform, Phase::full, cfg, 3, 0);
    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
      CHECK(a.items[i].reward == b.items[i].reward);
      for (size_t s = 0; s < a.items[i].traj.steps.size(); ++s)
        CHECK(a.items[i].traj.steps[s].grid.tokens ==
              b.items[i].traj.steps[s].grid.tokens);
    }
  }

  SUBCASE("a deterministic policy collapses the group") {
    PolicyParams det = uniform;
    det.table_entry(0, 0)[0] = 60.0;
    for (uint64_t code = 0; code < det.states_at(1); ++code) {
      auto row = det.table_entry(1, code);
      row[0] = 60.0;            // site 0 -> token 0 ("a")
      row[task.vocab + 1] = 60.0;  // site 1 -> token 1 ("b")
    }
    const RolloutGroup grp =
        collect_group(task, det, det, Phase::full, cfg, 1, 0);
    for (const auto& item : grp.items) {
      CHECK(item.reward == doctest::Approx(grp.items[0].reward));
      CHECK(item.traj.steps[1].grid.tokens == std::vector<int32_t>{0, 1});
      CHECK(item.reward == doctest::Approx(2.0).epsilon(1e-6));
    }
  }

  SUBCASE("suffix groups share s_m") {
    const RolloutGroup grp =
        collect_group(task, uniform, uniform, Phase::suffix, cfg, 2, 0);
    CHECK(grp.shared_prefix.step() == 1);
    for (const auto& item : grp.items) {
      CHECK(item.traj.start_step() == 1);
      CHECK(item.traj.prefix.grids() == grp.shared_prefix.grids());
    }
  }

  SUBCASE("prefix at the terminal split degenerates to the raw reward") {
    TrainerConfig deg = cfg;
    deg.split_m = 2;
    deg.vmr.k_samples = 1;
    const RolloutGroup grp =
        collect_group(task, uniform, uniform, Phase::prefix, deg, 4, 0);
    for (const auto& item : grp.items) {
      const double direct = task.terminal_reward(item.traj.final_state());
      CHECK(item.reward == doctest::Approx(direct).epsilon(1e-12));
    }
  }
}

TEST_CASE("surrogate loss") {
  const TaskSpec task = mini_text_task();
  TrainerConfig cfg;
  cfg.group_size = 4;
  cfg.split_m = 1;
  cfg.seed = 6;
  const PolicyParams uniform = PolicyParams::tabular(task.schedule, task.vocab);

  SUBCASE("on-policy identity: unit ratios, zero KL") {
    RolloutGroup grp =
        collect_group(task, uniform, uniform, Phase::full, cfg, 1, 0);
    std::vector<double> rewards;
    for (const auto& item : grp.items) rewards.push_back(item.reward);
    const auto adv = group_advantages(rewards, 1e-6);
    for (size_t i = 0; i < grp.items.size(); ++i) grp.items[i].advantage = adv[i];
    const SurrogateResult res = surrogate_loss(grp, uniform, uniform, cfg);
    CHECK(res.clipped_fraction == 0.0);
    CHECK(res.mean_kl <= 1e-15);
    CHECK(res.active_sites == 4 * 3);
    // with rho = 1 the loss reduces to -mean(weighted advantages)
    CHECK(std::isfinite(res.loss));
  }

  SUBCASE("zero advantages leave only the KL gradient") {
    RolloutGroup grp =
        collect_group(task, uniform, uniform, Phase::full, cfg, 2, 0);
    for (auto& item : grp.items) item.advantage = 0.0;
    PolicyParams current = uniform;
    current.table_entry(0, 0)[1] = 0.4;  // drift from the reference
    TrainerConfig nokl = cfg;
    nokl.kl_coef = 0.0;
    const SurrogateResult no_kl = surrogate_loss(grp, current, uniform, nokl);
    CHECK(no_kl.grad.squared_norm() == 0.0);
    const SurrogateResult with_kl = surrogate_loss(grp, current, uniform, cfg);
    CHECK(with_kl.grad.squared_norm() > 0.0);
  }

  SUBCASE("hand-checked clip branch") {
    // single site, advantage +1, ratio forced to 1.5, eps 0.2
    TaskSpec bandit = bandit_task();
    TrainerConfig bcfg;
    bcfg.group_size = 2;
    bcfg.clip_eps = 0.2;
    bcfg.kl_coef = 0.0;
    bcfg.panw.normalize = false;
    const PolicyParams ref = PolicyParams::tabular(bandit.schedule, 2);
    PolicyParams current = ref;
    // current log-prob of token 0: log(p); sampling log-prob log(p/1.5)
    RolloutGroup grp =
        collect_group(bandit, ref, ref, Phase::full, bcfg, 1, 0);
    grp.items.erase(grp.items.begin() + 1, grp.items.end());
    grp.items[0].traj.steps[0].grid.tokens[0] = 0;
    grp.items[0].traj.steps[0].logp[0] = std::log(0.5 / 1.5);
    grp.items[0].traj.steps[0].logp_trunc[0] = grp.items[0].traj.steps[0].logp[0];
    grp.items[0].advantage = 1.0;
    const SurrogateResult res = surrogate_loss(grp, current, ref, bcfg);
    // min(1.5*1, 1.2*1) = 1.2, one active site
    CHECK(res.loss == doctest::Approx(-1.2).epsilon(1e-9));
    CHECK(res.clipped_fraction == 1.0);
    // clipped branch: no surrogate gradient at this site
    CHECK(res.grad.squared_norm() == 0.0);
  }

  SUBCASE("gradient matches finite differences off-policy") {
    Rng rng = make_rng(302);
    int checked = 0;
    while (checked < 40) {
      const bool contextual = checked % 4 == 3;
      TaskSpec t = mini_text_task();
      TrainerConfig c;
      c.group_size = 3;
      c.split_m = 1;
      c.kl_coef = 0.05;
      c.clip_eps = 0.2;
      c.seed = 400 + static_cast<uint64_t>(checked);
      PolicyParams sampling =
          contextual ? PolicyParams::contextual(t.schedule, t.vocab)
                     : PolicyParams::tabular(t.schedule, t.vocab);
      {
        auto slots = testutil::param_slots(sampling);
        for (double* x : slots) *x = 0.4 * normal01(rng);
      }
      const Phase phase = (checked % 2 == 0) ? Phase::full : Phase::suffix;
      RolloutGroup grp =
          collect_group(t, sampling, sampling, phase, c,
                        static_cast<uint64_t>(checked), 0);
      std::vector<double> rewards;
      for (const auto& item : grp.items) rewards.push_back(item.reward);
      const auto adv = group_advantages(rewards, 1e-6);
      for (size_t i = 0; i < grp.items.size(); ++i)
        grp.items[i].advantage = adv[i];

      // perturbed current params so ratios leave 1
      PolicyParams current = sampling;
      auto slots = testutil::param_slots(current);
      for (double* x : slots) *x += 0.15 * normal01(rng);

      // keep clear of clip kinks so central differences are valid
      bool near_kink = false;
      for (const auto& item : grp.items) {
        VarState cur = item.traj.prefix;
        for (const auto& step : item.traj.steps) {
          const auto ctx = current.state_ctx(cur);
          for (size_t k = 0; k < step.grid.tokens.size(); ++k) {
            const auto lp = log_softmax(
                current.site_logits(ctx, static_cast<int>(k)));
            const double rho =
                std::exp(lp[static_cast<size_t>(step.grid.tokens[k])] -
                         step.logp[k]);
            if (std::fabs(rho - (1.0 - c.clip_eps)) < 2e-3 ||
                std::fabs(rho - (1.0 + c.clip_eps)) < 2e-3)
              near_kink = true;
          }
          cur.push_grid(step.grid);
        }
      }
      if (near_kink) continue;

      const SurrogateResult res = surrogate_loss(grp, current, sampling, c);
      const auto analytic = testutil::grad_values(res.grad, current);
      auto loss = [&]() { return surrogate_loss(grp, current, sampling, c).loss; };
      const auto fd = testutil::fd_gradient(slots, loss);
      CHECK(testutil::rel_error(analytic, fd) <= 1e-4);
      ++checked;
    }
  }
}

TEST_CASE("panw balances per-step gradient mass") {
  // per-step sum of k_t * ||onehot - softmax||; alpha=1 should level the
  // steps of the r64 schedule, alpha=0 leaves the 16x site-count imbalance
  const ScaleSchedule r64 = builtin_schedule(ResolutionTag::r64);
  Rng rng = make_rng(303);
  const int vocab = 4;
  std::vector<double> mass_alpha1(r64.size(), 0.0), mass_alpha0(r64.size(), 0.0);
  const auto w1 = panw_weights(r64, {1.0, false});
  const auto w0 = panw_weights(r64, {0.0, false});
  for (int sample = 0; sample < 1000; ++sample) {
    for (size_t t = 0; t < r64.size(); ++t) {
      for (int site = 0; site < r64[t].sites(); ++site) {
        std::vector<double> logits(vocab);
        for (double& x : logits) x = normal01(rng);
        const auto p = softmax(logits);
        const int tok = categorical(rng, p);
        double sq = 0.0;
        for (int v = 0; v < vocab; ++v) {
          const double d = (v == tok ? 1.0 : 0.0) - p[static_cast<size_t>(v)];
          sq += d * d;
        }
        const double norm = std::sqrt(sq);
        mass_alpha1[t] += w1[t] * norm;
        mass_alpha0[t] += w0[t] * norm;
      }
    }
  }
  const auto ratio = [](const std::vector<double>& m) {
    double lo = m[0], hi = m[0];
    for (double x : m) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    return hi / lo;
  };
  CHECK(ratio(mass_alpha1) <= 2.0);
  CHECK(ratio(mass_alpha0) >= 14.0);
}

TEST_CASE("trainer basics") {
  SUBCASE("config validation") {
    const TaskSpec task = bandit_task();
    TrainerConfig cfg;
    cfg.group_size = 1;
    CHECK_THROWS_AS(train(task, cfg), ConfigError);
    cfg.group_size = 4;
    cfg.clip_eps = 1.5;
    CHECK_THROWS_AS(train(task, cfg), ConfigError);
    cfg.clip_eps = 0.2;
    cfg.split_m = 7;
    CHECK_THROWS_AS(train(task, cfg), ConfigError);
  }

  SUBCASE("config json round trip") {
    TrainerConfig cfg;
    cfg.mode = TrainMode::vanilla;
    cfg.updates = 123;
    cfg.split_m = 2;
    cfg.panw.alpha = 0.8;
    cfg.sampler.top_k = 2;
    cfg.sampler.top_p = 0.9;
    cfg.standardize_advantages = false;
    cfg.kl_reward_coef = 0.5;
    cfg.alternation = Alternation::coarse;
    const TrainerConfig back = TrainerConfig::from_json(cfg.to_json());
    CHECK(back.mode == TrainMode::vanilla);
    CHECK(back.updates == 123);
    CHECK(back.split_m == 2);
    CHECK(back.panw.alpha == 0.8);
    CHECK(back.sampler.top_k == 2);
    CHECK(back.sampler.top_p == 0.9);
    CHECK(back.standardize_advantages == false);
    CHECK(back.kl_reward_coef == 0.5);
    CHECK(back.alternation == Alternation::coarse);
  }

  SUBCASE("zero learning rate leaves the policy unchanged") {
    const TaskSpec task = mini_text_task();
    TrainerConfig cfg;
    cfg.mode = TrainMode::vanilla;
    cfg.updates = 10;
    cfg.group_size = 4;
    cfg.batch_size = 1;
    cfg.optimizer.learning_rate = 0.0;
    cfg.seed = 9;
    const TrainResult res = train(task, cfg);
    const VarState root(task.schedule, task.vocab);
    const auto dist = res.params.site_distribution(root, 0);
    for (double p : dist) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    for (const auto& rep : res.reports) CHECK(std::isfinite(rep.mean_reward));
  }

  SUBCASE("fine and coarse alternation schedules") {
    const TaskSpec task = mini_text_task();
    TrainerConfig cfg;
    cfg.updates = 8;
    cfg.group_size = 2;
    cfg.batch_size = 1;
    cfg.split_m = 1;
    cfg.optimizer.learning_rate = 0.0;
    cfg.seed = 10;
    const TrainResult fine = train(task, cfg);
    const std::vector<Phase> expect_fine = {
        Phase::prefix, Phase::prefix, Phase::prefix, Phase::suffix,
        Phase::prefix, Phase::prefix, Phase::prefix, Phase::suffix};
    for (int u = 0; u < 8; ++u) CHECK(fine.reports[u].phase == expect_fine[u]);

    cfg.alternation = Alternation::coarse;
    const TrainResult coarse = train(task, cfg);
    for (int u = 0; u < 6; ++u) CHECK(coarse.reports[u].phase == Phase::prefix);
    CHECK(coarse.reports[6].phase == Phase::suffix);
    CHECK(coarse.reports[7].phase == Phase::suffix);
  }

  SUBCASE("bandit converges to the rewarded arm") {
    const TaskSpec task = bandit_task();
    TrainerConfig cfg;
    cfg.mode = TrainMode::vanilla;
    cfg.updates = 500;
    cfg.group_size = 16;
    cfg.batch_size = 1;
    cfg.seed = 11;
    const TrainResult res = train(task, cfg);
    const VarState root(task.schedule, task.vocab);
    CHECK(res.params.site_distribution(root, 0)[0] >= 0.99);
    CHECK(res.final_trailing_reward >= 1.9);
    CHECK(res.updates_to_threshold <= cfg.updates);
  }

  SUBCASE("same seed reproduces the metrics byte for byte") {
    const TaskSpec task = spell_task();
    TrainerConfig cfg;
    cfg.updates = 12;
    cfg.group_size = 4;
    cfg.batch_size = 2;
    cfg.split_m = 2;
    cfg.seed = 12;
    const TrainResult a = train(task, cfg);
    const TrainResult b = train(task, cfg);
    CHECK(a.metrics_csv == b.metrics_csv);
    TrainerConfig other = cfg;
    other.seed = 13;
    const TrainResult c = train(task, other);
    CHECK(a.metrics_csv != c.metrics_csv);
  }

  SUBCASE("vanilla and vmr emit the same metrics schema") {
    const TaskSpec task = mini_text_task();
    TrainerConfig cfg;
    cfg.updates = 8;
    cfg.group_size = 4;
    cfg.batch_size = 1;
    cfg.split_m = 1;
    cfg.seed = 14;
    cfg.mode = TrainMode::vanilla;
    const TrainResult vanilla = train(task, cfg);
    cfg.mode = TrainMode::vmr;
    const TrainResult vmr = train(task, cfg);
    const std::string header(kMetricsCsvHeader);
    CHECK(vanilla.metrics_csv.substr(0, header.size()) == header);
    CHECK(vmr.metrics_csv.substr(0, header.size()) == header);
    for (const auto& rep : vanilla.reports) {
      CHECK(rep.phase == Phase::full);
      CHECK(std::isnan(rep.mean_vmr));
    }
    bool saw_prefix = false, saw_suffix = false;
    for (const auto& rep : vmr.reports) {
      saw_prefix = saw_prefix || rep.phase == Phase::prefix;
      saw_suffix = saw_suffix || rep.phase == Phase::suffix;
      if (rep.phase == Phase::prefix) CHECK(std::isfinite(rep.mean_vmr));
    }
    CHECK(saw_prefix);
    CHECK(saw_suffix);
  }
}

TEST_CASE("two-stage training against the oracle optimum") {
  // suffix-only training to convergence, then prefix training with the exact
  // V*_m as its reward, targets the constrained optimum of the soft objective
  const TaskSpec task = mini_text_task();
  const double eta = 1.0;
  const SoftControlProblem prob = problem_for(task, eta);

  TrainerConfig cfg;
  cfg.mode = TrainMode::vmr;
  cfg.split_m = 1;
  cfg.group_size = 32;
  cfg.batch_size = 1;
  cfg.updates = 1500;
  cfg.standardize_advantages = false;
  cfg.kl_reward_coef = eta;  // soft objective folded into the return
  cfg.kl_coef = 0.0;
  cfg.refresh_reference = false;  // reference stays the uniform pi_old
  cfg.optimizer.learning_rate = 0.35;
  cfg.optimizer.linear_decay = true;
  cfg.optimizer.momentum = 0.9;
  cfg.seed = 15;

  // stage 1: suffix only
  TrainerConfig suffix_cfg = cfg;
  suffix_cfg.forced_phase = Phase::suffix;
  const TrainResult stage1 = train(task, suffix_cfg);

  // stage 2: prefix only, rewarded by the oracle middle value
  const std::vector<double> v_m = middle_value(prob, 1);
  TrainHooks hooks;
  hooks.initial_params = stage1.params;
  hooks.prefix_value = [&](const VarState& s, uint64_t) {
    return v_m[s.prefix_code()];
  };
  TrainerConfig prefix_cfg = cfg;
  prefix_cfg.forced_phase = Phase::prefix;
  prefix_cfg.seed = 16;
  const TrainResult stage2 = train(task, prefix_cfg, hooks);

  const double j_trained = evaluate_policy(prob, stage2.params).objective;
  const FactorizedPolicy dagger = constrained_optimum(prob);
  const double j_dagger =
      evaluate_policy(prob, joint_logprob_tables(prob, dagger)).objective;
  CHECK(std::fabs(j_trained - j_dagger) <= 0.02);
}
