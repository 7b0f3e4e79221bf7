#include "varl/schedule.hpp"

#include <cmath>

#include "json.hpp"

namespace varl {

ScaleSchedule::ScaleSchedule(std::vector<GridShape> shapes)
    : shapes_(std::move(shapes)) {
  if (shapes_.empty()) throw ConfigError("schedule must be nonempty");
  for (size_t t = 0; t < shapes_.size(); ++t) {
    const auto& s = shapes_[t];
    if (s.h < 1 || s.w < 1) throw ConfigError("grid dims must be positive");
    if (t > 0 && s.sites() < shapes_[t - 1].sites())
      throw ConfigError("token counts must be nondecreasing across steps");
  }
}

int ScaleSchedule::tokens_before(size_t t) const {
  int n = 0;
  for (size_t u = 0; u < t; ++u) n += shapes_[u].sites();
  return n;
}

bool ScaleSchedule::is_prefix_of(const ScaleSchedule& other) const {
  if (size() > other.size()) return false;
  for (size_t t = 0; t < size(); ++t)
    if (!(shapes_[t] == other[t])) return false;
  return true;
}

std::string ScaleSchedule::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : shapes_) arr.push_back({s.h, s.w});
  return arr.dump();
}

ScaleSchedule ScaleSchedule::from_json(const std::string& text) {
  nlohmann::json arr = nlohmann::json::parse(text);
  std::vector<GridShape> shapes;
  for (const auto& e : arr)
    shapes.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return ScaleSchedule(std::move(shapes));
}

const char* to_string(ResolutionTag tag) {
  switch (tag) {
    case ResolutionTag::r64: return "r64";
    case ResolutionTag::r128: return "r128";
    case ResolutionTag::r256: return "r256";
    case ResolutionTag::r512: return "r512";
    case ResolutionTag::r1024: return "r1024";
  }
  return "?";
}

ResolutionTag resolution_tag_from_string(const std::string& name) {
  if (name == "r64" || name == "64") return ResolutionTag::r64;
  if (name == "r128" || name == "128") return ResolutionTag::r128;
  if (name == "r256" || name == "256") return ResolutionTag::r256;
  if (name == "r512" || name == "512") return ResolutionTag::r512;
  if (name == "r1024" || name == "1024") return ResolutionTag::r1024;
  throw ConfigError("unknown resolution tag: " + name);
}

ScaleSchedule builtin_schedule(ResolutionTag tag) {
  std::vector<GridShape> shapes = {{1, 1}, {2, 2}, {3, 3}, {4, 4}};
  if (tag == ResolutionTag::r64) return ScaleSchedule(shapes);
  shapes.insert(shapes.end(), {{5, 5}, {6, 6}, {7, 7}, {8, 8}});
  if (tag == ResolutionTag::r128) return ScaleSchedule(shapes);
  shapes.insert(shapes.end(), {{10, 10}, {12, 12}, {14, 14}, {16, 16}});
  if (tag == ResolutionTag::r256) return ScaleSchedule(shapes);
  shapes.insert(shapes.end(), {{20, 20}, {24, 24}, {28, 28}, {32, 32}});
  if (tag == ResolutionTag::r512) return ScaleSchedule(shapes);
  shapes.insert(shapes.end(), {{48, 48}, {64, 64}});
  return ScaleSchedule(shapes);
}

double panw_weight(GridShape shape, const PanwConfig& cfg) {
  if (!std::isfinite(cfg.alpha)) throw ConfigError("panw alpha must be finite");
  return std::pow(static_cast<double>(shape.sites()), -cfg.alpha);
}

std::vector<double> panw_weights(const ScaleSchedule& schedule,
                                 const PanwConfig& cfg) {
  return panw_weights(schedule, cfg, 0, schedule.size());
}

std::vector<double> panw_weights(const ScaleSchedule& schedule,
                                 const PanwConfig& cfg, size_t begin,
                                 size_t end) {
  std::vector<double> w;
  w.reserve(end - begin);
  for (size_t t = begin; t < end; ++t)
    w.push_back(panw_weight(schedule[t], cfg));
  if (cfg.normalize && !w.empty()) {
    double total = 0.0;
    for (double x : w) total += x;
    for (double& x : w) x /= total;
  }
  return w;
}

size_t split_index(const ScaleSchedule& schedule, ResolutionTag tag) {
  ScaleSchedule prefix = builtin_schedule(tag);
  if (!prefix.is_prefix_of(schedule))
    throw NotAPrefixError(std::string(to_string(tag)) +
                          " schedule is not a prefix of the given schedule");
  return prefix.size();
}

}  // namespace varl
