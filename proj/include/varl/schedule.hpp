#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "varl/common.hpp"

namespace varl {

// One token grid shape in the coarse-to-fine hierarchy.
struct GridShape {
  int h = 1;
  int w = 1;
  int sites() const { return h * w; }
  bool operator==(const GridShape&) const = default;
};

// Ordered grid shapes, one per generation step. Token counts must be
// nondecreasing from coarse to fine.
class ScaleSchedule {
 public:
  ScaleSchedule() = default;
  explicit ScaleSchedule(std::vector<GridShape> shapes);

  size_t size() const { return shapes_.size(); }
  const GridShape& operator[](size_t t) const { return shapes_[t]; }
  const std::vector<GridShape>& shapes() const { return shapes_; }
  auto begin() const { return shapes_.begin(); }
  auto end() const { return shapes_.end(); }

  // number of tokens emitted before step t (t in [0, size()])
  int tokens_before(size_t t) const;
  int total_tokens() const { return tokens_before(shapes_.size()); }

  bool is_prefix_of(const ScaleSchedule& other) const;

  std::string to_json() const;
  static ScaleSchedule from_json(const std::string& text);

 private:
  std::vector<GridShape> shapes_;
};

enum class ResolutionTag { r64, r128, r256, r512, r1024 };

const char* to_string(ResolutionTag tag);
ResolutionTag resolution_tag_from_string(const std::string& name);

// The five square schedules used by the reference model, by target
// resolution.
ScaleSchedule builtin_schedule(ResolutionTag tag);

// Per-step loss weighting: w_t = (h_t*w_t)^(-alpha), optionally renormalized
// to sum to one across the steps it is computed over.
struct PanwConfig {
  double alpha = 0.6;
  bool normalize = true;
};

double panw_weight(GridShape shape, const PanwConfig& cfg);

std::vector<double> panw_weights(const ScaleSchedule& schedule,
                                 const PanwConfig& cfg);

// Weights for the steps in [begin, end); normalization, when enabled, is over
// that segment only.
std::vector<double> panw_weights(const ScaleSchedule& schedule,
                                 const PanwConfig& cfg, size_t begin,
                                 size_t end);

// Number of steps in tag's builtin schedule, provided it is a prefix of
// `schedule`. This is the prefix/suffix split point: the first `m` grids form
// the prefix segment. Throws NotAPrefixError otherwise.
size_t split_index(const ScaleSchedule& schedule, ResolutionTag tag);

}  // namespace varl
