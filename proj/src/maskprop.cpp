#include "varl/maskprop.hpp"

#include "json.hpp"

namespace varl {

BoolGrid seed_mask(GridShape finest,
                   const std::vector<std::pair<int, int>>& regions) {
  BoolGrid g{finest, std::vector<uint8_t>(
                         static_cast<size_t>(finest.sites()), 0)};
  for (const auto& [i, j] : regions) {
    if (i < 0 || i >= finest.h || j < 0 || j >= finest.w)
      throw OutOfBoundsError("seed site (" + std::to_string(i) + "," +
                             std::to_string(j) + ") outside grid");
    g.set(i, j, true);
  }
  return g;
}

std::pair<int, int> ancestor_site(int a, int b, GridShape fine,
                                  GridShape coarse) {
  return {a * coarse.h / fine.h, b * coarse.w / fine.w};
}

MaskPyramid propagate(const ScaleSchedule& schedule, const BoolGrid& finest,
                      std::string provenance) {
  if (!(finest.shape == schedule[schedule.size() - 1]))
    throw ShapeMismatchError("finest mask does not match the last schedule step");
  MaskPyramid pyr;
  pyr.provenance = std::move(provenance);
  pyr.levels.reserve(schedule.size());
  for (size_t t = 0; t + 1 < schedule.size(); ++t) {
    const GridShape coarse = schedule[t];
    BoolGrid g{coarse,
               std::vector<uint8_t>(static_cast<size_t>(coarse.sites()), 0)};
    for (int a = 0; a < finest.shape.h; ++a) {
      for (int b = 0; b < finest.shape.w; ++b) {
        if (!finest.at(a, b)) continue;
        const auto [i, j] = ancestor_site(a, b, finest.shape, coarse);
        g.set(i, j, true);
      }
    }
    pyr.levels.push_back(std::move(g));
  }
  pyr.levels.push_back(finest);
  return pyr;
}

std::vector<std::vector<double>> gate_weights(
    const MaskPyramid& pyramid,
    const std::vector<std::vector<double>>& base_weights, double off_factor) {
  if (base_weights.size() != pyramid.levels.size())
    throw ShapeMismatchError("weight steps do not match pyramid levels");
  std::vector<std::vector<double>> out = base_weights;
  for (size_t t = 0; t < out.size(); ++t) {
    const BoolGrid& mask = pyramid.levels[t];
    if (out[t].size() != mask.cells.size())
      throw ShapeMismatchError("weight sites do not match mask at step " +
                               std::to_string(t));
    for (size_t k = 0; k < out[t].size(); ++k)
      if (!mask.cells[k]) out[t][k] *= off_factor;
  }
  return out;
}

std::string mask_pyramid_to_json(const MaskPyramid& pyramid) {
  nlohmann::json j;
  j["provenance"] = pyramid.provenance;
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& g : pyramid.levels) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < g.shape.h; ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int jj = 0; jj < g.shape.w; ++jj) row.push_back(g.at(i, jj) ? 1 : 0);
      rows.push_back(std::move(row));
    }
    levels.push_back(std::move(rows));
  }
  j["levels"] = std::move(levels);
  return j.dump();
}

}  // namespace varl
