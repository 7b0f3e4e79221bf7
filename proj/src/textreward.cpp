#include "varl/textreward.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace varl {

std::string to_lower(std::string s) {
  for (char& c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

int edit_distance(const std::string& x, const std::string& y) {
  const size_t n = x.size(), m = y.size();
  if (n == 0) return static_cast<int>(m);
  if (m == 0) return static_cast<int>(n);
  std::vector<int> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double levenshtein_score(const std::string& x, const std::string& y,
                         double eps) {
  const double denom = static_cast<double>(std::max(x.size(), y.size())) + eps;
  return 1.0 - static_cast<double>(edit_distance(x, y)) / denom;
}

double completeness(const GroundTruth& gt, const Recognition& rec) {
  if (gt.words.empty()) return 0.0;
  double total = 0.0;
  for (const auto& g : gt.words) {
    double best = 0.0;
    bool found = false;
    for (size_t i = 0; i < rec.words.size(); ++i) {
      if (rec.words[i] != g) continue;
      best = found ? std::min(best, rec.confidences[i]) : rec.confidences[i];
      found = true;
    }
    if (found) total += best;
  }
  return total / static_cast<double>(gt.words.size());
}

double length_penalty(const GroundTruth& gt, const Recognition& rec,
                      const RewardConfig& cfg) {
  std::array<long, 256> diff{};
  size_t np = 0, ng = 0;
  for (const auto& w : rec.words) {
    np += w.size();
    for (char c : w) diff[static_cast<unsigned char>(c)] += 1;
  }
  for (const auto& w : gt.words) {
    ng += w.size();
    for (char c : w) diff[static_cast<unsigned char>(c)] -= 1;
  }
  if (np + ng == 0) return 0.0;
  long bag = 0;
  for (long d : diff) bag += std::labs(d);
  return cfg.lambda * static_cast<double>(bag) /
         static_cast<double>(np + ng);
}

// best-LD prediction index for one ground-truth word; ties to lowest index
static int best_match_index(const std::string& g, const Recognition& rec,
                            double eps) {
  int best = -1;
  double best_ld = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < rec.words.size(); ++i) {
    const double ld = levenshtein_score(g, rec.words[i], eps);
    if (ld > best_ld) {
      best_ld = ld;
      best = static_cast<int>(i);
    }
  }
  return best;
}

double similarity(const GroundTruth& gt, const Recognition& rec,
                  const RewardConfig& cfg) {
  if (gt.words.empty() || rec.words.empty()) return 0.0;
  double total = 0.0;
  for (const auto& g : gt.words) {
    const int i = best_match_index(g, rec, cfg.epsilon);
    total += levenshtein_score(g, rec.words[static_cast<size_t>(i)],
                               cfg.epsilon) *
             rec.confidences[static_cast<size_t>(i)];
  }
  return total / static_cast<double>(gt.words.size());
}

EvalMetrics eval_metrics(const GroundTruth& gt, const Recognition& rec) {
  EvalMetrics m;
  if (gt.words.empty() || rec.words.empty()) return m;
  double hits = 0.0, ned = 0.0;
  for (const auto& g : gt.words) {
    bool exact = false;
    for (const auto& p : rec.words)
      if (p == g) { exact = true; break; }
    if (exact) hits += 1.0;
    const int i = best_match_index(g, rec, 1e-6);
    ned += levenshtein_score(g, rec.words[static_cast<size_t>(i)], 1e-6);
  }
  m.word_accuracy = hits / static_cast<double>(gt.words.size());
  m.ned = ned / static_cast<double>(gt.words.size());
  return m;
}

RewardReport ocr_reward(const GroundTruth& gt, const Recognition& rec,
                        const RewardConfig& cfg) {
  if (rec.words.size() != rec.confidences.size())
    throw ConfigError("recognition words and confidences differ in length");
  RewardReport r;
  r.comp = completeness(gt, rec);
  r.sim = similarity(gt, rec, cfg);
  r.pen = length_penalty(gt, rec, cfg);
  r.total = r.comp + r.sim - r.pen;
  r.best_match.reserve(gt.words.size());
  for (const auto& g : gt.words)
    r.best_match.push_back(rec.words.empty()
                               ? -1
                               : best_match_index(g, rec, cfg.epsilon));
  const EvalMetrics m = eval_metrics(gt, rec);
  r.word_accuracy = m.word_accuracy;
  r.ned = m.ned;
  return r;
}

Recognition toy_recognize(const TokenGrid& grid, const TokenCodec& codec) {
  Recognition rec;
  std::string word;
  double conf_sum = 0.0;
  auto flush = [&]() {
    if (!word.empty()) {
      rec.words.push_back(to_lower(word));
      rec.confidences.push_back(conf_sum / static_cast<double>(word.size()));
    }
    word.clear();
    conf_sum = 0.0;
  };
  for (int32_t tok : grid.tokens) {
    if (tok == codec.delimiter_id) {
      flush();
      continue;
    }
    if (tok == codec.blank_id) continue;
    if (tok < 0 || static_cast<size_t>(tok) >= codec.glyphs.size()) continue;
    word.push_back(codec.glyphs[static_cast<size_t>(tok)]);
    conf_sum += codec.token_confidence.empty()
                    ? 1.0
                    : codec.token_confidence[static_cast<size_t>(tok)];
  }
  flush();
  return rec;
}

RewardReport score_record_json(const std::string& line,
                               const RewardConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(line);
  GroundTruth gt;
  for (const auto& w : j.at("gt")) gt.words.push_back(to_lower(w.get<std::string>()));
  Recognition rec;
  for (const auto& w : j.at("pred")) rec.words.push_back(to_lower(w.get<std::string>()));
  if (j.contains("conf")) {
    rec.confidences = j.at("conf").get<std::vector<double>>();
  } else {
    rec.confidences.assign(rec.words.size(), 1.0);
  }
  if (gt.words.empty()) throw ConfigError("record has empty ground truth");
  for (double c : rec.confidences)
    if (c < 0.0 || c > 1.0) throw ConfigError("confidence outside [0,1]");
  return ocr_reward(gt, rec, cfg);
}

std::string reward_report_to_json(const RewardReport& report) {
  nlohmann::json j;
  j["comp"] = report.comp;
  j["sim"] = report.sim;
  j["pen"] = report.pen;
  j["total"] = report.total;
  j["best_match"] = report.best_match;
  j["word_accuracy"] = report.word_accuracy;
  j["ned"] = report.ned;
  return j.dump();
}

}  // namespace varl
