#include "varl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace varl {

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

TaskSpec spell_task() {
  TaskSpec task;
  task.name = "spell";
  task.description =
      "Render one three-letter word on the finest grid of a three-step "
      "token pyramid; reward is the toy OCR score.";
  task.schedule = make_schedule({{1, 1}, {2, 2}, {4, 4}});
  task.vocab = 8;
  task.codec.glyphs = "catdog";
  task.codec.delimiter_id = 6;
  task.codec.blank_id = 7;
  task.ground_truth = {"cat"};
  task.reward_cfg = {};
  // comp <= 1, sim <= 1, pen >= 0 bounds the reward by 2; the witness grid
  // "c a t <delim> blanks..." attains it, so 2.0 is the certified optimum
  task.reward_reference = 2.0;
  return task;
}

std::string task_to_json(const TaskSpec& task) {
  nlohmann::json j;
  j["name"] = task.name;
  j["description"] = task.description;
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& s : *task.schedule) sched.push_back({s.h, s.w});
  j["schedule"] = sched;
  j["vocab"] = task.vocab;
  j["glyphs"] = task.codec.glyphs;
  j["delimiter_id"] = task.codec.delimiter_id;
  j["blank_id"] = task.codec.blank_id;
  if (!task.codec.token_confidence.empty())
    j["token_confidence"] = task.codec.token_confidence;
  j["ground_truth"] = task.ground_truth;
  j["reward"] = {{"lambda", task.reward_cfg.lambda},
                 {"epsilon", task.reward_cfg.epsilon}};
  j["reward_reference"] = task.reward_reference;
  return j.dump(2);
}

TaskSpec task_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TaskSpec task;
  task.name = j.value("name", std::string("task"));
  task.description = j.value("description", std::string());
  std::vector<GridShape> shapes;
  for (const auto& e : j.at("schedule"))
    shapes.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  task.schedule = make_schedule(std::move(shapes));
  task.vocab = j.at("vocab").get<int>();
  task.codec.glyphs = j.value("glyphs", std::string());
  task.codec.delimiter_id = j.value("delimiter_id", -1);
  task.codec.blank_id = j.value("blank_id", -1);
  if (j.contains("token_confidence"))
    task.codec.token_confidence =
        j.at("token_confidence").get<std::vector<double>>();
  task.ground_truth = j.at("ground_truth").get<std::vector<std::string>>();
  if (j.contains("reward")) {
    task.reward_cfg.lambda = j["reward"].value("lambda", 0.6);
    task.reward_cfg.epsilon = j["reward"].value("epsilon", 1e-6);
  }
  task.reward_reference = j.value("reward_reference", 2.0);
  for (const auto& w : task.ground_truth) {
    for (char c : w) {
      if (task.codec.glyphs.find(c) == std::string::npos)
        throw ConfigError("ground-truth word '" + w +
                          "' uses characters outside the codec");
    }
  }
  return task;
}

TaskSpec resolve_task(const std::string& name_or_json) {
  if (name_or_json == "spell") return spell_task();
  if (!name_or_json.empty() && name_or_json.front() == '{')
    return task_from_json(name_or_json);
  if (fs::exists(name_or_json)) return task_from_json(read_file(name_or_json));
  throw ConfigError("unknown task: " + name_or_json);
}

// ---------------------------------------------------------------------------
// Run persistence
// ---------------------------------------------------------------------------

std::string runs_root() {
  if (const char* env = std::getenv("VARL_RUNS_DIR"); env && *env)
    return env;
  return "runs";
}

namespace {

std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path fresh_run_dir(const std::string& root, const std::string& name,
                       uint64_t seed) {
  const fs::path base = fs::path(root) / name;
  fs::create_directories(base);
  const std::string stem = timestamp_utc() + "-" + std::to_string(seed);
  fs::path dir = base / stem;
  for (int k = 2; fs::exists(dir); ++k) dir = base / (stem + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

}  // namespace

RunRecord execute_run(const TaskSpec& task, const TrainerConfig& cfg,
                      const std::string& root, bool persist,
                      const TrainHooks& hooks) {
  RunRecord rec;
  fs::path dir;
  TrainHooks run_hooks = hooks;
  std::vector<fs::path> checkpoints;
  if (persist) {
    dir = fresh_run_dir(root, cfg.run_name, cfg.seed);
    rec.dir = dir.string();
    nlohmann::json cj;
    cj["task"] = nlohmann::json::parse(task_to_json(task));
    cj["trainer"] = nlohmann::json::parse(cfg.to_json());
    write_file(dir / "config.json", cj.dump(2) + "\n");
    run_hooks.on_checkpoint = [&, keep = cfg.checkpoints_keep](
                                  int update, const PolicyParams& params) {
      const fs::path ck = dir / ("checkpoint-" + std::to_string(update) +
                                 ".json");
      write_file(ck, params.to_json());
      checkpoints.push_back(ck);
      while (static_cast<int>(checkpoints.size()) > keep) {
        fs::remove(checkpoints.front());
        checkpoints.erase(checkpoints.begin());
      }
      if (hooks.on_checkpoint) hooks.on_checkpoint(update, params);
    };
  }

  rec.result = train(task, cfg, run_hooks);

  if (persist) {
    write_file(dir / "metrics.csv", rec.result.metrics_csv);
    write_file(dir / "params.json", rec.result.params.to_json());
    nlohmann::json rj;
    rj["task"] = task.name;
    rj["seed"] = cfg.seed;
    rj["updates"] = cfg.updates;
    rj["threshold"] = rec.result.threshold;
    rj["updates_to_threshold"] = rec.result.updates_to_threshold;
    rj["final_trailing_reward"] = rec.result.final_trailing_reward;
    write_file(dir / "report.json", rj.dump(2) + "\n");
  }
  return rec;
}

RunConfig load_run_config(const std::string& run_dir) {
  nlohmann::json cj =
      nlohmann::json::parse(read_file(fs::path(run_dir) / "config.json"));
  RunConfig rc{task_from_json(cj.at("task").dump()),
               TrainerConfig::from_json(cj.at("trainer").dump())};
  return rc;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

void apply_axis_value(TrainerConfig& cfg, const std::string& axis,
                      const std::string& value) {
  if (axis == "m") {
    cfg.split_m = static_cast<size_t>(std::stoul(value));
  } else if (axis == "alpha") {
    cfg.panw.alpha = std::stod(value);
  } else if (axis == "k_samples") {
    cfg.vmr.k_samples = std::stoi(value);
  } else if (axis == "alternation") {
    if (value == "fine") cfg.alternation = Alternation::fine;
    else if (value == "coarse") cfg.alternation = Alternation::coarse;
    else throw ConfigError("unknown alternation value: " + value);
  } else if (axis == "mode") {
    if (value == "vanilla") cfg.mode = TrainMode::vanilla;
    else if (value == "vmr") cfg.mode = TrainMode::vmr;
    else throw ConfigError("unknown mode value: " + value);
  } else {
    throw ConfigError("unknown sweep axis: " + axis);
  }
}

SweepSpec SweepSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SweepSpec spec;
  spec.name = j.value("name", std::string("sweep"));
  spec.task = j.contains("task") && j["task"].is_object()
                  ? task_from_json(j["task"].dump())
                  : resolve_task(j.value("task", std::string("spell")));
  spec.base = j.contains("base") ? TrainerConfig::from_json(j["base"].dump())
                                 : TrainerConfig{};
  spec.axis = j.at("axis").get<std::string>();
  for (const auto& v : j.at("values")) {
    spec.values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  }
  spec.seeds_per_cell = j.value("seeds_per_cell", 3);
  spec.first_seed = j.value("first_seed", uint64_t{1});
  return spec;
}

SweepReport run_sweep(const SweepSpec& spec, const std::string& root,
                      bool persist) {
  if (spec.values.empty()) throw ConfigError("sweep needs at least one value");
  if (spec.seeds_per_cell < 3)
    throw ConfigError("sweeps need at least 3 seeds per cell");
  SweepReport report;
  std::string csv =
      spec.axis + ",median_final_reward,median_updates_to_threshold,seeds,"
      "failures\n";
  for (const auto& value : spec.values) {
    std::vector<double> finals, utts;
    int failures = 0;
    for (int s = 0; s < spec.seeds_per_cell; ++s) {
      SweepCell cell;
      cell.value = value;
      cell.seed = spec.first_seed + static_cast<uint64_t>(s);
      try {
        TrainerConfig cfg = spec.base;
        apply_axis_value(cfg, spec.axis, value);
        cfg.seed = cell.seed;
        cfg.run_name = spec.name + "-" + spec.axis + "-" + value;
        RunRecord rec = execute_run(spec.task, cfg, root, persist);
        cell.ok = true;
        cell.final_reward = rec.result.final_trailing_reward;
        cell.updates_to_threshold = rec.result.updates_to_threshold;
        cell.run_dir = rec.dir;
        finals.push_back(cell.final_reward);
        utts.push_back(static_cast<double>(cell.updates_to_threshold));
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        failures += 1;
      }
      report.cells.push_back(std::move(cell));
    }
    csv += value + "," + fmt(median(finals)) + "," + fmt(median(utts)) + "," +
           std::to_string(spec.seeds_per_cell) + "," +
           std::to_string(failures) + "\n";
  }
  report.table_csv = std::move(csv);
  if (persist) {
    const fs::path base = fs::path(root) / spec.name;
    fs::create_directories(base);
    write_file(base / "sweep.csv", report.table_csv);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Theory verification
// ---------------------------------------------------------------------------

ProblemSuiteSpec ProblemSuiteSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ProblemSuiteSpec spec;
  if (j.contains("schedule")) {
    spec.schedule.clear();
    for (const auto& e : j.at("schedule"))
      spec.schedule.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  }
  spec.vocab = j.value("vocab", spec.vocab);
  if (j.contains("etas")) spec.etas = j.at("etas").get<std::vector<double>>();
  spec.problems = j.value("problems", spec.problems);
  spec.policies = j.value("policies", spec.policies);
  spec.seed = j.value("seed", spec.seed);
  spec.reward_lo = j.value("reward_lo", spec.reward_lo);
  spec.reward_hi = j.value("reward_hi", spec.reward_hi);
  spec.random_reference = j.value("random_reference", spec.random_reference);
  return spec;
}

SoftControlProblem random_problem(const ProblemSuiteSpec& spec,
                                  uint64_t index) {
  Rng rng = make_rng(spec.seed, mix64(0x70726fu, index));
  SoftControlProblem prob;
  prob.schedule = make_schedule(spec.schedule);
  prob.vocab = spec.vocab;
  prob.eta = spec.etas[index % spec.etas.size()];
  prob.reference =
      spec.random_reference
          ? random_tabular_policy(prob.schedule, prob.vocab, rng, 0.7)
          : PolicyParams::tabular(prob.schedule, prob.vocab);
  uint64_t terminal = 1;
  for (const auto& s : *prob.schedule)
    for (int k = 0; k < s.sites(); ++k) terminal *= static_cast<uint64_t>(spec.vocab);
  std::vector<double> rewards(terminal);
  for (double& r : rewards) r = uniform_in(rng, spec.reward_lo, spec.reward_hi);
  prob.terminal_reward = reward_from_table(std::move(rewards));
  return prob;
}

VerificationReport verify_theory(const ProblemSuiteSpec& spec) {
  VerificationReport report;
  double worst_norm = 0.0, worst_mv = 0.0;
  double worst_kl_gap = 0.0, worst_value_gap = 0.0;
  double worst_identity = 0.0, worst_stationarity = 0.0;
  int nonconverged = 0;

  for (int p = 0; p < spec.problems; ++p) {
    const SoftControlProblem prob = random_problem(spec, static_cast<uint64_t>(p));
    const SoftSolution sol = solve_soft(prob);
    const size_t n = prob.schedule->size();

    // pi* rows sum to one
    for (size_t t = 0; t < n; ++t) {
      for (uint64_t code = 0; code < sol.n_states[t]; ++code) {
        double mass = 0.0;
        for (double x : sol.pi_star(t, code)) mass += x;
        worst_norm = std::max(worst_norm, std::fabs(mass - 1.0));
      }
    }

    // middle values recomputed forward vs the backward tables
    for (size_t m = 0; m <= n; ++m) {
      const std::vector<double> mv = middle_value(prob, m);
      for (uint64_t code = 0; code < sol.n_states[m]; ++code)
        worst_mv = std::max(worst_mv, std::fabs(mv[code] - sol.value[m][code]));
      const InvarianceReport inv = two_stage_check(prob, m);
      worst_kl_gap = std::max(worst_kl_gap, inv.kl_gap);
      worst_value_gap = std::max(worst_value_gap, inv.value_gap);
    }

    // variational identity over random policies
    Rng rng = make_rng(spec.seed, mix64(0x706fu, static_cast<uint64_t>(p)));
    for (int k = 0; k < spec.policies; ++k) {
      const PolicyParams pol =
          random_tabular_policy(prob.schedule, prob.vocab, rng, 1.0);
      const VariationalCheck check = variational_identity_check(
          prob, sol, joint_logprob_tables(prob, pol));
      worst_identity = std::max(worst_identity, check.gap);
    }

    // reverse-KL projection certificates
    MeanFieldOptions opts;
    opts.seed = mix64(spec.seed, static_cast<uint64_t>(p));
    const FactorizedPolicy proj = constrained_optimum(prob, opts);
    worst_stationarity =
        std::max(worst_stationarity, proj.worst_stationarity_gap);
    nonconverged += proj.nonconverged_states;
  }

  auto add = [&](const std::string& property, double measured, double tol,
                 const std::string& detail) {
    VerifyRow row{property, measured <= tol, measured, tol, detail};
    report.all_pass = report.all_pass && row.pass;
    report.rows.push_back(std::move(row));
  };
  add("pi_star_normalization", worst_norm, 1e-10, "max |sum pi* - 1|");
  add("middle_value_consistency", worst_mv, 1e-10,
      "max |forward V*_m - backward V*_m|");
  add("two_stage_kl_gap", worst_kl_gap, 1e-8,
      "max KL(concat || full optimum) over problems and m");
  add("two_stage_value_gap", worst_value_gap, 1e-8,
      "max |J(concat) - eta log Z| over problems and m");
  add("variational_identity", worst_identity, 1e-9,
      "max |J(pi) - (eta log Z - eta KL(p_pi||p*))| over random policies");
  add("reverse_kl_stationarity", worst_stationarity, 1e-9,
      "max single-site KL improvement left at the projected optimum");
  add("mean_field_nonconvergence", static_cast<double>(nonconverged), 0.0,
      "states whose projection hit the sweep limit");
  return report;
}

std::string VerificationReport::to_json() const {
  nlohmann::json j;
  j["all_pass"] = all_pass;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& row : rows) {
    arr.push_back({{"property", row.property},
                   {"pass", row.pass},
                   {"measured", row.measured},
                   {"tolerance", row.tolerance},
                   {"detail", row.detail}});
  }
  j["rows"] = std::move(arr);
  return j.dump(2);
}

std::string VerificationReport::to_text() const {
  std::string out;
  for (const auto& row : rows) {
    out += row.pass ? "[PASS] " : "[FAIL] ";
    out += row.property + ": " + fmt(row.measured) +
           " (tol " + fmt(row.tolerance) + ") - " + row.detail + "\n";
  }
  out += all_pass ? "all properties hold\n" : "some properties FAILED\n";
  return out;
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

std::vector<CurveSeries> load_curves(const std::vector<std::string>& run_dirs) {
  std::vector<CurveSeries> out;
  for (const auto& dir : run_dirs) {
    CurveSeries series;
    series.label = fs::path(dir).filename().string();
    if (series.label.empty())
      series.label = fs::path(dir).parent_path().filename().string();
    std::istringstream in(read_file(fs::path(dir) / "metrics.csv"));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string field;
      std::getline(row, field, ',');
      const int update = std::stoi(field);
      std::getline(row, field, ',');  // phase
      std::getline(row, field, ',');
      const double reward = std::strtod(field.c_str(), nullptr);
      if (std::isfinite(reward)) series.points.emplace_back(update, reward);
    }
    out.push_back(std::move(series));
  }
  return out;
}

std::string curves_csv(const std::vector<CurveSeries>& series) {
  std::string out = "run,update,mean_reward\n";
  for (const auto& s : series)
    for (const auto& [u, r] : s.points)
      out += s.label + "," + std::to_string(u) + "," + fmt(r) + "\n";
  return out;
}

std::string curves_svg(const std::vector<CurveSeries>& series, int width,
                       int height) {
  const double ml = 50, mr = 15, mt = 15, mb = 35;
  double xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& [u, r] : s.points) {
      if (!any) { ymin = ymax = r; any = true; }
      xmax = std::max(xmax, static_cast<double>(u));
      ymin = std::min(ymin, r);
      ymax = std::max(ymax, r);
    }
  }
  if (ymax - ymin < 1e-9) { ymax += 1.0; ymin -= 1.0; }
  const double plot_w = width - ml - mr, plot_h = height - mt - mb;
  auto px = [&](double u) { return ml + u / xmax * plot_w; };
  auto py = [&](double r) { return mt + (ymax - r) / (ymax - ymin) * plot_h; };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\""
      << ml + plot_w << "\" y2=\"" << mt + plot_h
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << ml + plot_w / 2 << "\" y=\"" << height - 8
      << "\" font-size=\"12\" text-anchor=\"middle\">update</text>\n";
  svg << "<text x=\"12\" y=\"" << mt + plot_h / 2
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 "
      << 12 << " " << mt + plot_h / 2 << ")\">mean reward</text>\n";
  svg << "<text x=\"" << ml - 6 << "\" y=\"" << py(ymax) + 4
      << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(ymax)
      << "</text>\n";
  svg << "<text x=\"" << ml - 6 << "\" y=\"" << py(ymin) + 4
      << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(ymin)
      << "</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = palette[i % 8];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [u, r] : series[i].points)
      svg << px(u) << "," << py(r) << " ";
    svg << "\"/>\n";
    svg << "<text x=\"" << ml + 8 << "\" y=\"" << mt + 14 + 14 * i
        << "\" font-size=\"11\" fill=\"" << color << "\">"
        << series[i].label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace varl
