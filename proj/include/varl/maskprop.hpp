#pragma once

#include <string>
#include <utility>
#include <vector>

#include "varl/schedule.hpp"

namespace varl {

struct BoolGrid {
  GridShape shape;
  std::vector<uint8_t> cells;  // row-major 0/1

  bool at(int i, int j) const { return cells[static_cast<size_t>(i) * shape.w + j] != 0; }
  void set(int i, int j, bool v) { cells[static_cast<size_t>(i) * shape.w + j] = v ? 1 : 0; }
  bool operator==(const BoolGrid&) const = default;
};

// Per-step relevance masks matching the schedule, coarse grids derived from
// the finest by OR-reduction under the proportional cell mapping.
struct MaskPyramid {
  std::vector<BoolGrid> levels;  // one per schedule step
  std::string provenance;
};

BoolGrid seed_mask(GridShape finest,
                   const std::vector<std::pair<int, int>>& regions);

// finest site (a,b) on (H,W) maps to coarse site (a*h/H, b*w/W)
std::pair<int, int> ancestor_site(int a, int b, GridShape fine,
                                  GridShape coarse);

MaskPyramid propagate(const ScaleSchedule& schedule, const BoolGrid& finest,
                      std::string provenance = "");

// Per-step per-site weights gated by the pyramid: kept where the mask is
// true, multiplied by off_factor where false.
std::vector<std::vector<double>> gate_weights(
    const MaskPyramid& pyramid,
    const std::vector<std::vector<double>>& base_weights,
    double off_factor = 0.0);

std::string mask_pyramid_to_json(const MaskPyramid& pyramid);

}  // namespace varl
