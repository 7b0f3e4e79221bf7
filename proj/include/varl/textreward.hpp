#pragma once

#include <string>
#include <vector>

#include "varl/mdp.hpp"

namespace varl {

// OCR-style recognition output: predicted words with confidences in [0,1].
struct Recognition {
  std::vector<std::string> words;
  std::vector<double> confidences;
};

struct GroundTruth {
  std::vector<std::string> words;
};

struct RewardConfig {
  double lambda = 0.6;    // length-mismatch penalty weight
  double epsilon = 1e-6;  // guards division by zero in the edit score
};

struct RewardReport {
  double comp = 0.0;
  double sim = 0.0;
  double pen = 0.0;
  double total = 0.0;
  std::vector<int> best_match;  // per ground-truth word; -1 when no predictions
  double word_accuracy = 0.0;
  double ned = 0.0;
};

struct EvalMetrics {
  double word_accuracy = 0.0;
  double ned = 0.0;
};

// Maps token ids to characters for the toy recognizer. One id acts as the
// word delimiter; an optional blank id decodes to nothing. Ids beyond the
// glyph list also decode to nothing.
struct TokenCodec {
  std::string glyphs;     // glyphs[id] for id < glyphs.size()
  int delimiter_id = -1;
  int blank_id = -1;
  std::vector<double> token_confidence;  // per id; empty = all 1.0
};

std::string to_lower(std::string s);

int edit_distance(const std::string& x, const std::string& y);

// 1 - EditDist(x,y) / (max(|x|,|y|) + eps)
double levenshtein_score(const std::string& x, const std::string& y,
                         double eps = 1e-6);

// fraction of ground-truth words exactly present, each weighted by the
// minimum confidence among identical predictions
double completeness(const GroundTruth& gt, const Recognition& rec);

// lambda * |char-multiset symmetric difference| / total character count
double length_penalty(const GroundTruth& gt, const Recognition& rec,
                      const RewardConfig& cfg);

// mean over ground-truth words of best edit score times matched confidence;
// argmax ties break to the lowest prediction index
double similarity(const GroundTruth& gt, const Recognition& rec,
                  const RewardConfig& cfg);

EvalMetrics eval_metrics(const GroundTruth& gt, const Recognition& rec);

RewardReport ocr_reward(const GroundTruth& gt, const Recognition& rec,
                        const RewardConfig& cfg = {});

// Decodes a token grid row-major, splits on the delimiter, drops empty words.
// Word confidence is the mean of its tokens' codec confidences.
Recognition toy_recognize(const TokenGrid& grid, const TokenCodec& codec);

// One JSONL record {"gt": [...], "pred": [...], "conf": [...]} -> report.
// Words are lowercased on ingestion.
RewardReport score_record_json(const std::string& line,
                               const RewardConfig& cfg = {});
std::string reward_report_to_json(const RewardReport& report);

}  // namespace varl
