#include "varl/mdp.hpp"

#include <cmath>
#include <numeric>

#include "json.hpp"

namespace varl {

// ---------------------------------------------------------------------------
// VarState
// ---------------------------------------------------------------------------

VarState::VarState(SchedulePtr schedule, int vocab)
    : schedule_(std::move(schedule)), vocab_(vocab) {
  if (!schedule_) throw ConfigError("null schedule");
  if (vocab_ < 1) throw ConfigError("vocab must be positive");
  grids_.reserve(schedule_->size());
}

uint64_t VarState::prefix_code() const {
  if (!code_ok_)
    throw UnknownStateError("prefix encoding overflows 64 bits at step " +
                            std::to_string(step()));
  return code_;
}

void VarState::push_grid(const TokenGrid& g) {
  if (terminal())
    throw ShapeMismatchError("schedule exhausted: no step " +
                             std::to_string(step() + 1));
  const GridShape expect = (*schedule_)[step()];
  if (!(g.shape == expect) ||
      g.tokens.size() != static_cast<size_t>(expect.sites()))
    throw ShapeMismatchError("grid shape does not match schedule step " +
                             std::to_string(step()));
  for (int32_t tok : g.tokens)
    if (tok < 0 || tok >= vocab_)
      throw UnknownStateError("token id out of vocabulary");

  code_stack_.push_back({code_, radix_, code_ok_});
  if (code_ok_) {
    for (int32_t tok : g.tokens) {
      uint64_t term = 0, next_radix = 0;
      if (__builtin_mul_overflow(radix_, static_cast<uint64_t>(tok), &term) ||
          __builtin_add_overflow(code_, term, &code_) ||
          __builtin_mul_overflow(radix_, static_cast<uint64_t>(vocab_),
                                 &next_radix)) {
        code_ok_ = false;
        break;
      }
      radix_ = next_radix;
    }
  }
  grids_.push_back(g);
}

void VarState::pop_grid() {
  if (grids_.empty()) throw OutOfBoundsError("pop on empty state");
  grids_.pop_back();
  const CodeMark mark = code_stack_.back();
  code_stack_.pop_back();
  code_ = mark.code;
  radix_ = mark.radix;
  code_ok_ = mark.ok;
}

VarState transition(const VarState& state, const TokenGrid& action) {
  VarState next = state;
  next.push_grid(action);
  return next;
}

// ---------------------------------------------------------------------------
// PolicyParams
// ---------------------------------------------------------------------------

PolicyParams PolicyParams::tabular(SchedulePtr schedule, int vocab,
                                   uint64_t state_bound) {
  PolicyParams p;
  p.mode_ = PolicyMode::tabular;
  p.schedule_ = std::move(schedule);
  p.vocab_ = vocab;
  p.state_bound_ = state_bound;
  const size_t n = p.schedule_->size();
  p.state_counts_.resize(n);
  uint64_t total = 0;
  uint64_t count = 1;
  for (size_t t = 0; t < n; ++t) {
    p.state_counts_[t] = count;
    if (__builtin_add_overflow(total, count, &total) || total > state_bound)
      throw TooLargeError("tabular state count exceeds bound " +
                          std::to_string(state_bound));
    const int sites = (*p.schedule_)[t].sites();
    for (int s = 0; s < sites; ++s) {
      if (__builtin_mul_overflow(count, static_cast<uint64_t>(vocab), &count))
        throw TooLargeError("tabular state count overflows 64 bits");
    }
  }
  p.tables_.resize(n);
  return p;
}

PolicyParams PolicyParams::contextual(SchedulePtr schedule, int vocab) {
  PolicyParams p;
  p.mode_ = PolicyMode::contextual;
  p.schedule_ = std::move(schedule);
  p.vocab_ = vocab;
  const size_t n = p.schedule_->size();
  // pooled 2x2 histogram of the previous grid + timestep one-hot + bias
  p.feature_dim_ = 4 * static_cast<size_t>(vocab) + n + 1;
  p.weights_.resize(n);
  for (size_t t = 0; t < n; ++t) {
    p.weights_[t].assign(
        static_cast<size_t>((*p.schedule_)[t].sites()),
        std::vector<double>(static_cast<size_t>(vocab) * p.feature_dim_, 0.0));
  }
  return p;
}

std::vector<double> PolicyParams::features(const VarState& s) const {
  const size_t n = schedule_->size();
  std::vector<double> phi(4 * static_cast<size_t>(vocab_) + n + 1, 0.0);
  const size_t t = s.step();
  if (t > 0) {
    const TokenGrid& g = s.last_grid();
    const int h = g.shape.h, w = g.shape.w;
    int cell_count[4] = {0, 0, 0, 0};
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const int ci = std::min(i * 2 / h, 1);
        const int cj = std::min(j * 2 / w, 1);
        const int cell = ci * 2 + cj;
        phi[static_cast<size_t>(cell) * vocab_ + g.at(i, j)] += 1.0;
        cell_count[cell] += 1;
      }
    }
    for (int cell = 0; cell < 4; ++cell) {
      if (cell_count[cell] == 0) continue;
      for (int v = 0; v < vocab_; ++v)
        phi[static_cast<size_t>(cell) * vocab_ + v] /= cell_count[cell];
    }
  }
  phi[4 * static_cast<size_t>(vocab_) + t] = 1.0;
  phi.back() = 1.0;
  return phi;
}

PolicyParams::StateCtx PolicyParams::state_ctx(const VarState& s) const {
  if (s.terminal())
    throw OutOfBoundsError("no action distribution at a terminal state");
  StateCtx ctx;
  ctx.step = s.step();
  if (mode_ == PolicyMode::tabular) {
    ctx.code = s.prefix_code();
    if (ctx.code >= state_counts_[ctx.step])
      throw UnknownStateError("prefix outside the enumerated state set");
  } else {
    ctx.phi = features(s);
  }
  return ctx;
}

std::vector<double> PolicyParams::site_logits(const StateCtx& ctx,
                                              int site) const {
  std::vector<double> logits(static_cast<size_t>(vocab_), 0.0);
  if (mode_ == PolicyMode::tabular) {
    const auto& table = tables_[ctx.step];
    auto it = table.find(ctx.code);
    if (it != table.end()) {
      const double* row = it->second.data() + static_cast<size_t>(site) * vocab_;
      logits.assign(row, row + vocab_);
    }
  } else {
    std::span<const double> wrow = site_weights(ctx.step, site);
    const size_t f = feature_dim_;
    for (int v = 0; v < vocab_; ++v) {
      double acc = 0.0;
      const double* w = wrow.data() + static_cast<size_t>(v) * f;
      for (size_t k = 0; k < f; ++k) acc += w[k] * ctx.phi[k];
      logits[static_cast<size_t>(v)] = acc;
    }
  }
  return logits;
}

std::vector<double> PolicyParams::site_logits(const VarState& s,
                                              int site) const {
  return site_logits(state_ctx(s), site);
}

std::vector<double> PolicyParams::site_distribution(const VarState& s,
                                                    int site) const {
  return softmax(site_logits(s, site));
}

std::vector<std::vector<double>> PolicyParams::step_distributions(
    const VarState& s) const {
  const StateCtx ctx = state_ctx(s);
  const int sites = schedule()[ctx.step].sites();
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<size_t>(sites));
  for (int k = 0; k < sites; ++k) out.push_back(softmax(site_logits(ctx, k)));
  return out;
}

std::span<double> PolicyParams::table_entry(size_t step, uint64_t code) {
  if (mode_ != PolicyMode::tabular)
    throw ConfigError("table_entry on a contextual policy");
  if (step >= tables_.size() || code >= state_counts_[step])
    throw UnknownStateError("prefix outside the enumerated state set");
  auto& row = tables_[step][code];
  if (row.empty())
    row.assign(static_cast<size_t>((*schedule_)[step].sites()) * vocab_, 0.0);
  return row;
}

std::span<double> PolicyParams::site_weights(size_t step, int site) {
  auto& row = weights_[step][static_cast<size_t>(site)];
  return {row.data(), row.size()};
}

std::span<const double> PolicyParams::site_weights(size_t step,
                                                   int site) const {
  const auto& row = weights_[step][static_cast<size_t>(site)];
  return {row.data(), row.size()};
}

std::string PolicyParams::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["mode"] = mode_ == PolicyMode::tabular ? "tabular" : "contextual";
  j["vocab"] = vocab_;
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& s : *schedule_) sched.push_back({s.h, s.w});
  j["schedule"] = sched;
  if (mode_ == PolicyMode::tabular) {
    j["state_bound"] = state_bound_;
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& table : tables_) {
      nlohmann::json entries = nlohmann::json::object();
      for (const auto& [code, row] : table)
        entries[std::to_string(code)] = row;
      steps.push_back(std::move(entries));
    }
    j["tables"] = std::move(steps);
  } else {
    j["weights"] = weights_;
  }
  return j.dump();
}

PolicyParams PolicyParams::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  std::vector<GridShape> shapes;
  for (const auto& e : j.at("schedule"))
    shapes.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  auto schedule = make_schedule(std::move(shapes));
  const int vocab = j.at("vocab").get<int>();
  if (j.at("mode") == "tabular") {
    PolicyParams p = PolicyParams::tabular(
        schedule, vocab, j.value("state_bound", uint64_t{1} << 20));
    const auto& steps = j.at("tables");
    for (size_t t = 0; t < steps.size(); ++t) {
      for (auto it = steps[t].begin(); it != steps[t].end(); ++it) {
        const uint64_t code = std::stoull(it.key());
        auto row = it.value().get<std::vector<double>>();
        auto dst = p.table_entry(t, code);
        std::copy(row.begin(), row.end(), dst.begin());
      }
    }
    return p;
  }
  PolicyParams p = PolicyParams::contextual(schedule, vocab);
  p.weights_ = j.at("weights")
                   .get<std::vector<std::vector<std::vector<double>>>>();
  return p;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

std::vector<double> truncate_distribution(std::span<const double> probs,
                                          const SamplerConfig& cfg) {
  const size_t v = probs.size();
  std::vector<int> order(v);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
  });
  size_t keep = v;
  if (cfg.top_k > 0) keep = std::min(keep, static_cast<size_t>(cfg.top_k));
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    size_t k = 0;
    while (k < keep) {
      cum += probs[static_cast<size_t>(order[k])];
      ++k;
      if (cum >= cfg.top_p) break;
    }
    keep = std::max<size_t>(k, 1);
  }
  std::vector<double> out(v, 0.0);
  double mass = 0.0;
  for (size_t k = 0; k < keep; ++k) mass += probs[static_cast<size_t>(order[k])];
  for (size_t k = 0; k < keep; ++k) {
    const size_t idx = static_cast<size_t>(order[k]);
    out[idx] = probs[idx] / mass;
  }
  return out;
}

ActionSample sample_action(const PolicyParams& params, const VarState& state,
                           const SamplerConfig& sampler, Rng& rng) {
  const auto ctx = params.state_ctx(state);
  const GridShape shape = params.schedule()[ctx.step];
  const int sites = shape.sites();
  ActionSample out;
  out.grid.shape = shape;
  out.grid.tokens.resize(static_cast<size_t>(sites));
  out.logp.resize(static_cast<size_t>(sites));
  out.logp_trunc.resize(static_cast<size_t>(sites));
  for (int k = 0; k < sites; ++k) {
    const std::vector<double> logits = params.site_logits(ctx, k);
    const std::vector<double> logp = log_softmax(logits);
    std::vector<double> probs(logp.size());
    for (size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
    int tok;
    if (sampler.truncates()) {
      const std::vector<double> tp = truncate_distribution(probs, sampler);
      tok = categorical(rng, tp);
      out.logp_trunc[static_cast<size_t>(k)] =
          std::log(tp[static_cast<size_t>(tok)]);
    } else {
      tok = categorical(rng, probs);
      out.logp_trunc[static_cast<size_t>(k)] = logp[static_cast<size_t>(tok)];
    }
    out.grid.tokens[static_cast<size_t>(k)] = tok;
    out.logp[static_cast<size_t>(k)] = logp[static_cast<size_t>(tok)];
  }
  return out;
}

VarState Trajectory::final_state() const {
  VarState s = prefix;
  for (const auto& step : steps) s.push_grid(step.grid);
  return s;
}

double Trajectory::sample_logprob() const {
  double total = 0.0;
  for (const auto& step : steps)
    for (double lp : step.logp) total += lp;
  return total;
}

double Trajectory::sample_logprob_trunc() const {
  double total = 0.0;
  for (const auto& step : steps)
    for (double lp : step.logp_trunc) total += lp;
  return total;
}

std::string Trajectory::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["seed"] = seed;
  j["start_step"] = prefix.step();
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& g : prefix.grids()) pre.push_back(g.tokens);
  j["prefix"] = std::move(pre);
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    steps_json.push_back({{"tokens", s.grid.tokens},
                          {"logp", s.logp},
                          {"logp_trunc", s.logp_trunc}});
  }
  j["steps"] = std::move(steps_json);
  return j.dump();
}

Trajectory rollout(const PolicyParams& params, const VarState& from,
                   const SamplerConfig& sampler, Rng& rng,
                   std::optional<size_t> until_step) {
  const size_t stop = until_step.value_or(params.schedule().size());
  if (stop > params.schedule().size() || stop < from.step())
    throw OutOfBoundsError("rollout horizon outside the schedule");
  Trajectory traj{from, {}, 0};
  VarState cur = from;
  while (cur.step() < stop) {
    ActionSample a = sample_action(params, cur, sampler, rng);
    cur.push_grid(a.grid);
    traj.steps.push_back(
        {std::move(a.grid), std::move(a.logp), std::move(a.logp_trunc)});
  }
  return traj;
}

double trajectory_logprob(const PolicyParams& params, const Trajectory& traj) {
  double total = 0.0;
  VarState cur = traj.prefix;
  for (const auto& step : traj.steps) {
    const auto ctx = params.state_ctx(cur);
    const int sites = params.schedule()[ctx.step].sites();
    if (step.grid.tokens.size() != static_cast<size_t>(sites))
      throw ShapeMismatchError("trajectory grid does not match schedule");
    for (int k = 0; k < sites; ++k) {
      const std::vector<double> logp = log_softmax(params.site_logits(ctx, k));
      total += logp[static_cast<size_t>(step.grid.tokens[static_cast<size_t>(k)])];
    }
    cur.push_grid(step.grid);
  }
  return total;
}

// ---------------------------------------------------------------------------
// PolicyGradient
// ---------------------------------------------------------------------------

PolicyGradient::PolicyGradient(const PolicyParams& shape_of)
    : mode_(shape_of.mode()), vocab_(shape_of.vocab()) {
  const size_t n = shape_of.schedule().size();
  step_sites_.resize(n);
  for (size_t t = 0; t < n; ++t) step_sites_[t] = shape_of.schedule()[t].sites();
  if (mode_ == PolicyMode::tabular) {
    tables_.resize(n);
  } else {
    weights_.resize(n);
    for (size_t t = 0; t < n; ++t) {
      weights_[t].assign(static_cast<size_t>(step_sites_[t]),
                         std::vector<double>(static_cast<size_t>(vocab_) *
                                                 shape_of.feature_dim(),
                                             0.0));
    }
  }
}

void PolicyGradient::add_site_logit_grad(const PolicyParams& params,
                                         const PolicyParams::StateCtx& ctx,
                                         int site,
                                         std::span<const double> dlogits,
                                         double scale) {
  if (mode_ == PolicyMode::tabular) {
    auto& row = tables_[ctx.step][ctx.code];
    if (row.empty())
      row.assign(static_cast<size_t>(step_sites_[ctx.step]) * vocab_, 0.0);
    double* dst = row.data() + static_cast<size_t>(site) * vocab_;
    for (int v = 0; v < vocab_; ++v) dst[v] += scale * dlogits[static_cast<size_t>(v)];
  } else {
    auto& wrow = weights_[ctx.step][static_cast<size_t>(site)];
    const size_t f = params.feature_dim();
    for (int v = 0; v < vocab_; ++v) {
      double* dst = wrow.data() + static_cast<size_t>(v) * f;
      const double g = scale * dlogits[static_cast<size_t>(v)];
      if (g == 0.0) continue;
      for (size_t k = 0; k < f; ++k) dst[k] += g * ctx.phi[k];
    }
  }
}

void PolicyGradient::add(const PolicyGradient& other, double c) {
  if (mode_ == PolicyMode::tabular) {
    for (size_t t = 0; t < tables_.size(); ++t) {
      for (const auto& [code, row] : other.tables_[t]) {
        auto& dst = tables_[t][code];
        if (dst.empty()) dst.assign(row.size(), 0.0);
        for (size_t i = 0; i < row.size(); ++i) dst[i] += c * row[i];
      }
    }
  } else {
    for (size_t t = 0; t < weights_.size(); ++t)
      for (size_t s = 0; s < weights_[t].size(); ++s)
        for (size_t i = 0; i < weights_[t][s].size(); ++i)
          weights_[t][s][i] += c * other.weights_[t][s][i];
  }
}

void PolicyGradient::scale(double c) {
  if (mode_ == PolicyMode::tabular) {
    for (auto& table : tables_)
      for (auto& [code, row] : table)
        for (double& x : row) x *= c;
  } else {
    for (auto& step : weights_)
      for (auto& row : step)
        for (double& x : row) x *= c;
  }
}

std::vector<double> PolicyGradient::per_step_squared_norm() const {
  std::vector<double> out(step_sites_.size(), 0.0);
  if (mode_ == PolicyMode::tabular) {
    for (size_t t = 0; t < tables_.size(); ++t)
      for (const auto& [code, row] : tables_[t])
        for (double x : row) out[t] += x * x;
  } else {
    for (size_t t = 0; t < weights_.size(); ++t)
      for (const auto& row : weights_[t])
        for (double x : row) out[t] += x * x;
  }
  return out;
}

double PolicyGradient::squared_norm() const {
  double total = 0.0;
  for (double x : per_step_squared_norm()) total += x;
  return total;
}

bool PolicyGradient::finite() const {
  if (mode_ == PolicyMode::tabular) {
    for (const auto& table : tables_)
      for (const auto& [code, row] : table)
        for (double x : row)
          if (!std::isfinite(x)) return false;
  } else {
    for (const auto& step : weights_)
      for (const auto& row : step)
        for (double x : row)
          if (!std::isfinite(x)) return false;
  }
  return true;
}

PolicyGradient logprob_gradient(
    const PolicyParams& params, const Trajectory& traj,
    const std::vector<std::vector<double>>& weights) {
  if (weights.size() != traj.steps.size())
    throw ShapeMismatchError("site weights do not match trajectory steps");
  PolicyGradient grad(params);
  VarState cur = traj.prefix;
  std::vector<double> dlogits(static_cast<size_t>(params.vocab()));
  for (size_t si = 0; si < traj.steps.size(); ++si) {
    const auto& step = traj.steps[si];
    const auto ctx = params.state_ctx(cur);
    const int sites = params.schedule()[ctx.step].sites();
    for (int k = 0; k < sites; ++k) {
      const double w = weights[si][static_cast<size_t>(k)];
      if (w == 0.0) continue;
      const std::vector<double> p = softmax(params.site_logits(ctx, k));
      const int tok = step.grid.tokens[static_cast<size_t>(k)];
      for (int v = 0; v < params.vocab(); ++v)
        dlogits[static_cast<size_t>(v)] =
            (v == tok ? 1.0 : 0.0) - p[static_cast<size_t>(v)];
      grad.add_site_logit_grad(params, ctx, k, dlogits, w);
    }
    cur.push_grid(step.grid);
  }
  return grad;
}

}  // namespace varl
