#include <cmath>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "varl/mdp.hpp"

using namespace varl;

namespace {

PolicyParams uniform_tabular(const SchedulePtr& sched, int vocab) {
  return PolicyParams::tabular(sched, vocab);
}

// dominant logit on `token` at every enumerable state
PolicyParams point_mass_tabular(const SchedulePtr& sched, int vocab,
                                int token) {
  PolicyParams p = PolicyParams::tabular(sched, vocab);
  for (size_t t = 0; t < sched->size(); ++t) {
    for (uint64_t code = 0; code < p.states_at(t); ++code) {
      auto row = p.table_entry(t, code);
      const int sites = (*sched)[t].sites();
      for (int s = 0; s < sites; ++s)
        row[static_cast<size_t>(s) * vocab + token] = 60.0;
    }
  }
  return p;
}

}  // namespace

TEST_CASE("transition appends and leaves the input untouched") {
  auto sched = make_schedule({{1, 1}, {2, 2}});
  VarState s0(sched, 4);
  const VarState s1 = transition(s0, TokenGrid{{1, 1}, {2}});
  CHECK(s0.step() == 0);
  CHECK(s1.step() == 1);
  CHECK(s1.grid(0).tokens == std::vector<int32_t>{2});

  const VarState s2 = transition(s1, TokenGrid{{2, 2}, {0, 1, 2, 3}});
  CHECK(s2.step() == 2);
  CHECK(s2.terminal());

  // replaying the grid sequence is bit-identical
  VarState replay(sched, 4);
  replay.push_grid(s1.grid(0));
  replay.push_grid(s2.grid(1));
  CHECK(replay.prefix_code() == s2.prefix_code());
  CHECK(replay.grids() == s2.grids());

  CHECK_THROWS_AS(transition(s2, TokenGrid{{2, 2}, {0, 0, 0, 0}}),
                  ShapeMismatchError);
  CHECK_THROWS_AS(transition(s0, TokenGrid{{2, 2}, {0, 0, 0, 0}}),
                  ShapeMismatchError);
  CHECK_THROWS_AS(transition(s0, TokenGrid{{1, 1}, {7}}), UnknownStateError);
}

TEST_CASE("prefix codes are the little-endian token encoding") {
  auto sched = make_schedule({{1, 1}, {2, 2}});
  VarState s(sched, 8);
  s.push_grid({{1, 1}, {3}});
  s.push_grid({{2, 2}, {1, 2, 0, 7}});
  // 3 + 1*8 + 2*64 + 0*512 + 7*4096
  CHECK(s.prefix_code() == 28811);
  s.pop_grid();
  CHECK(s.prefix_code() == 3);
}

TEST_CASE("site distributions") {
  auto sched = make_schedule({{1, 1}, {2, 2}});

  SUBCASE("zero logits give the uniform distribution") {
    PolicyParams p = uniform_tabular(sched, 4);
    const VarState s(sched, 4);
    const auto d = p.site_distribution(s, 0);
    for (double x : d) CHECK(x == 0.25);
  }

  SUBCASE("hand softmax") {
    PolicyParams p = uniform_tabular(sched, 2);
    auto row = p.table_entry(0, 0);
    row[0] = std::log(1.0);
    row[1] = std::log(3.0);
    const VarState s(sched, 2);
    const auto d = p.site_distribution(s, 0);
    CHECK(d[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(d[1] == doctest::Approx(0.75).epsilon(1e-12));
  }

  SUBCASE("normalization and positivity") {
    Rng rng = make_rng(11);
    PolicyParams p = uniform_tabular(sched, 4);
    auto row = p.table_entry(0, 0);
    for (double& x : row) x = 3.0 * normal01(rng);
    const VarState s(sched, 4);
    const auto d = p.site_distribution(s, 0);
    double sum = 0.0;
    for (double x : d) {
      CHECK(x > 0.0);
      sum += x;
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }

  SUBCASE("shift invariance") {
    Rng rng = make_rng(12);
    PolicyParams p = uniform_tabular(sched, 4);
    auto row = p.table_entry(0, 0);
    for (double& x : row) x = normal01(rng);
    const VarState s(sched, 4);
    const auto before = p.site_distribution(s, 0);
    for (int v = 0; v < 4; ++v) row[static_cast<size_t>(v)] += 17.25;
    const auto after = p.site_distribution(s, 0);
    for (int v = 0; v < 4; ++v)
      CHECK(after[static_cast<size_t>(v)] ==
            doctest::Approx(before[static_cast<size_t>(v)]).epsilon(1e-12));
  }

  SUBCASE("factorization: joint probabilities sum to one") {
    Rng rng = make_rng(13);
    PolicyParams p = uniform_tabular(sched, 2);
    VarState s(sched, 2);
    s.push_grid({{1, 1}, {1}});
    auto row = p.table_entry(1, 1);
    for (double& x : row) x = normal01(rng);
    const auto dists = p.step_distributions(s);
    double total = 0.0;
    for (int a = 0; a < 16; ++a) {
      double prob = 1.0;
      int rest = a;
      for (int k = 0; k < 4; ++k) {
        prob *= dists[static_cast<size_t>(k)][static_cast<size_t>(rest % 2)];
        rest /= 2;
      }
      total += prob;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("tabular mode enforcement") {
  CHECK_THROWS_AS(
      PolicyParams::tabular(make_schedule({{2, 2}, {4, 4}}), 8, 100),
      TooLargeError);
  auto sched = make_schedule({{1, 1}});
  PolicyParams p = uniform_tabular(sched, 2);
  CHECK_THROWS_AS(p.table_entry(0, 5), UnknownStateError);
  VarState term(sched, 2);
  term.push_grid({{1, 1}, {1}});
  CHECK_THROWS_AS(p.state_ctx(term), OutOfBoundsError);
}

TEST_CASE("sampling") {
  auto sched = make_schedule({{1, 1}, {2, 2}});

  SUBCASE("a dominant logit always wins") {
    PolicyParams p = point_mass_tabular(sched, 4, 2);
    Rng rng = make_rng(21);
    const VarState s(sched, 4);
    for (int it = 0; it < 50; ++it) {
      const ActionSample a = sample_action(p, s, {}, rng);
      CHECK(a.grid.tokens[0] == 2);
    }
  }

  SUBCASE("fixed seed reproduces the rollout") {
    Rng r1 = make_rng(99), r2 = make_rng(99);
    PolicyParams p = uniform_tabular(sched, 4);
    const VarState s0(sched, 4);
    const Trajectory t1 = rollout(p, s0, {}, r1);
    const Trajectory t2 = rollout(p, s0, {}, r2);
    REQUIRE(t1.steps.size() == t2.steps.size());
    for (size_t i = 0; i < t1.steps.size(); ++i) {
      CHECK(t1.steps[i].grid.tokens == t2.steps[i].grid.tokens);
      CHECK(t1.steps[i].logp == t2.steps[i].logp);
    }
  }

  SUBCASE("top-k truncation restricts the support") {
    PolicyParams p = uniform_tabular(make_schedule({{1, 1}}), 4);
    auto row = p.table_entry(0, 0);
    const double probs[4] = {0.4, 0.3, 0.2, 0.1};
    for (int v = 0; v < 4; ++v) row[static_cast<size_t>(v)] = std::log(probs[v]);
    const VarState s(make_schedule({{1, 1}}), 4);
    SamplerConfig cfg{2, 1.0};
    Rng rng = make_rng(31);
    std::set<int32_t> seen;
    for (int it = 0; it < 200; ++it) {
      const ActionSample a = sample_action(p, s, cfg, rng);
      seen.insert(a.grid.tokens[0]);
      const int tok = a.grid.tokens[0];
      // reported log-prob stays untruncated; the truncated law renormalizes
      CHECK(a.logp[0] == doctest::Approx(std::log(probs[tok])).epsilon(1e-9));
      CHECK(a.logp_trunc[0] ==
            doctest::Approx(std::log(probs[tok] / 0.7)).epsilon(1e-9));
    }
    CHECK(seen.size() == 2);
    CHECK(seen.count(0) == 1);
    CHECK(seen.count(1) == 1);
  }

  SUBCASE("top-p keeps the smallest covering prefix") {
    const std::vector<double> probs = {0.4, 0.3, 0.2, 0.1};
    const auto trunc = truncate_distribution(probs, SamplerConfig{0, 0.65});
    CHECK(trunc[0] == doctest::Approx(0.4 / 0.7));
    CHECK(trunc[1] == doctest::Approx(0.3 / 0.7));
    CHECK(trunc[2] == 0.0);
    CHECK(trunc[3] == 0.0);
  }
}

TEST_CASE("trajectory log-probabilities") {
  auto sched = make_schedule({{1, 1}, {2, 2}});

  SUBCASE("uniform policy: -5 ln 2") {
    PolicyParams p = uniform_tabular(sched, 2);
    Rng rng = make_rng(41);
    const Trajectory traj = rollout(p, VarState(sched, 2), {}, rng);
    CHECK(trajectory_logprob(p, traj) ==
          doctest::Approx(-5.0 * std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("deterministic policy on its own argmax path") {
    PolicyParams p = point_mass_tabular(sched, 2, 1);
    Rng rng = make_rng(42);
    const Trajectory traj = rollout(p, VarState(sched, 2), {}, rng);
    CHECK(std::fabs(trajectory_logprob(p, traj)) <= 1e-6);
  }

  SUBCASE("recomputation matches the stored per-site log-probs") {
    Rng prng = make_rng(43);
    auto sched3 = make_schedule({{1, 1}, {1, 2}, {2, 2}});
    PolicyParams p = uniform_tabular(sched3, 3);
    for (size_t t = 0; t < 3; ++t)
      for (uint64_t code = 0; code < p.states_at(t); ++code) {
        auto row = p.table_entry(t, code);
        for (double& x : row) x = normal01(prng);
      }
    Rng rng = make_rng(44);
    const Trajectory traj = rollout(p, VarState(sched3, 3), {}, rng);
    CHECK(trajectory_logprob(p, traj) ==
          doctest::Approx(traj.sample_logprob()).epsilon(1e-12));
  }
}

TEST_CASE("log-prob gradients") {
  SUBCASE("uniform binary site: onehot minus softmax") {
    auto sched = make_schedule({{1, 1}});
    PolicyParams p = uniform_tabular(sched, 2);
    Rng rng = make_rng(51);
    Trajectory traj = rollout(p, VarState(sched, 2), {}, rng);
    traj.steps[0].grid.tokens[0] = 0;  // force the sampled token
    const PolicyGradient g = logprob_gradient(p, traj, {{1.0}});
    const auto& row = g.tables()[0].at(0);
    CHECK(row[0] == doctest::Approx(0.5));
    CHECK(row[1] == doctest::Approx(-0.5));
  }

  SUBCASE("zero weights give a zero gradient") {
    auto sched = make_schedule({{1, 1}, {2, 2}});
    PolicyParams p = uniform_tabular(sched, 3);
    Rng rng = make_rng(52);
    const Trajectory traj = rollout(p, VarState(sched, 3), {}, rng);
    const PolicyGradient g =
        logprob_gradient(p, traj, {{0.0}, {0.0, 0.0, 0.0, 0.0}});
    CHECK(g.squared_norm() == 0.0);
  }

  SUBCASE("finite differences, tabular and contextual") {
    Rng rng = make_rng(53);
    int instances = 0;
    while (instances < 110) {
      const bool contextual = instances % 3 == 2;
      SchedulePtr sched;
      int vocab;
      if (contextual) {
        sched = make_schedule({{1, 1}, {1, 1}});
        vocab = 2;
      } else {
        switch (instances % 3) {
          case 0: sched = make_schedule({{1, 1}, {2, 2}}); vocab = 2; break;
          default: sched = make_schedule({{1, 1}, {1, 2}}); vocab = 3; break;
        }
      }
      PolicyParams p = contextual ? PolicyParams::contextual(sched, vocab)
                                  : PolicyParams::tabular(sched, vocab);
      auto slots = testutil::param_slots(p);
      REQUIRE(slots.size() <= 110);  // small instances only
      for (double* x : slots) *x = 0.8 * normal01(rng);

      Rng roll = make_rng(54, static_cast<uint64_t>(instances));
      const Trajectory traj = rollout(p, VarState(sched, vocab), {}, roll);
      std::vector<std::vector<double>> weights;
      for (const auto& step : traj.steps) {
        std::vector<double> w(step.grid.tokens.size());
        for (double& x : w) x = uniform_in(roll, -1.0, 1.0);
        weights.push_back(std::move(w));
      }

      const PolicyGradient g = logprob_gradient(p, traj, weights);
      const auto analytic = testutil::grad_values(g, p);
      auto loss = [&]() {
        double total = 0.0;
        VarState cur = traj.prefix;
        for (size_t si = 0; si < traj.steps.size(); ++si) {
          const auto ctx = p.state_ctx(cur);
          for (size_t k = 0; k < traj.steps[si].grid.tokens.size(); ++k) {
            const auto lp = log_softmax(p.site_logits(ctx, static_cast<int>(k)));
            total += weights[si][k] *
                     lp[static_cast<size_t>(traj.steps[si].grid.tokens[k])];
          }
          cur.push_grid(traj.steps[si].grid);
        }
        return total;
      };
      const auto fd = testutil::fd_gradient(slots, loss);
      CHECK(testutil::rel_error(analytic, fd) <= 1e-4);
      ++instances;
    }
  }
}

TEST_CASE("contextual features and distributions") {
  auto sched = make_schedule({{1, 1}, {2, 2}});
  PolicyParams p = PolicyParams::contextual(sched, 3);
  CHECK(p.feature_dim() == 4 * 3 + 2 + 1);

  VarState s(sched, 3);
  const auto phi0 = p.features(s);
  // no previous grid: histogram zeros, step one-hot + bias
  for (size_t i = 0; i < 12; ++i) CHECK(phi0[i] == 0.0);
  CHECK(phi0[12] == 1.0);
  CHECK(phi0[13] == 0.0);
  CHECK(phi0.back() == 1.0);

  s.push_grid({{1, 1}, {2}});
  const auto phi1 = p.features(s);
  CHECK(phi1[2] == 1.0);  // 1x1 grid pools into the first summary cell
  CHECK(phi1[13] == 1.0);

  // distributions respond to the weights
  auto w = p.site_weights(1, 0);
  w[2 * p.feature_dim() + 2] = 3.0;  // token 2 likes glyph 2 in cell 0
  const auto d = p.site_distribution(s, 0);
  CHECK(d[2] > d[0]);
  double sum = 0.0;
  for (double x : d) sum += x;
  CHECK(std::fabs(sum - 1.0) <= 1e-12);
}

TEST_CASE("params serialization round trip") {
  SUBCASE("tabular") {
    auto sched = make_schedule({{1, 1}, {2, 2}});
    PolicyParams p = PolicyParams::tabular(sched, 3);
    Rng rng = make_rng(61);
    auto row = p.table_entry(1, 2);
    for (double& x : row) x = normal01(rng);
    const PolicyParams back = PolicyParams::from_json(p.to_json());
    VarState s(sched, 3);
    s.push_grid({{1, 1}, {2}});
    CHECK(back.site_distribution(s, 3) == p.site_distribution(s, 3));
    CHECK(back.mode() == PolicyMode::tabular);
  }
  SUBCASE("contextual") {
    auto sched = make_schedule({{1, 1}, {1, 2}});
    PolicyParams p = PolicyParams::contextual(sched, 2);
    Rng rng = make_rng(62);
    for (size_t t = 0; t < 2; ++t)
      for (int k = 0; k < (*sched)[t].sites(); ++k) {
        auto w = p.site_weights(t, k);
        for (double& x : w) x = normal01(rng);
      }
    const PolicyParams back = PolicyParams::from_json(p.to_json());
    VarState s(sched, 2);
    s.push_grid({{1, 1}, {1}});
    CHECK(back.site_distribution(s, 1) == p.site_distribution(s, 1));
  }
}

TEST_CASE("trajectory json carries tokens and seed") {
  auto sched = make_schedule({{1, 1}, {2, 2}});
  PolicyParams p = uniform_tabular(sched, 2);
  Rng rng = make_rng(71);
  Trajectory traj = rollout(p, VarState(sched, 2), {}, rng);
  traj.seed = 71;
  const std::string json = traj.to_json();
  CHECK(json.find("\"seed\":71") != std::string::npos);
  CHECK(json.find("\"steps\"") != std::string::npos);
}
