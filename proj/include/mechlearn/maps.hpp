#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/metrics.hpp"

namespace mechlearn {

enum class MapMode {
  kStatic,   // one target, repeated with fresh forward noise
  kDynamic,  // targets sampled from the bootstrap ensemble
};

inline std::string to_string(MapMode m) { return m == MapMode::kStatic ? "static" : "dynamic"; }

inline MapMode map_mode_from_string(const std::string& s) {
  if (s == "static") return MapMode::kStatic;
  if (s == "dynamic") return MapMode::kDynamic;
  throw InvalidInput("unknown probability map mode '" + s + "'");
}

struct ProbabilityMap {
  Image2D values;  // in [0, 1]
  std::size_t n_aggregated = 0;
  MapMode mode = MapMode::kStatic;
};

/// Otsu-binarized positive part of gen - orig. A difference without any
/// spread (e.g. identical images) yields an empty mask.
inline BinaryMask binarized_difference(const Image2D& generated, const Image2D& original) {
  if (!generated.same_shape(original)) throw InvalidInput("difference: image shapes differ");
  Image2D d = generated;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::max(generated[i] - original[i], 0.0);
  BinaryMask out(d.width(), d.height());
  const auto [mn, mx] = std::minmax_element(d.pixels().begin(), d.pixels().end());
  if (!(*mx > *mn)) return out;
  const double thr = otsu_threshold(d);
  for (std::size_t i = 0; i < d.size(); ++i) out.set(i, d[i] > thr);
  return out;
}

inline ProbabilityMap aggregate_probability_map(const std::vector<BinaryMask>& masks, MapMode mode) {
  if (masks.empty()) throw InvalidInput("probability map needs at least one mask");
  ProbabilityMap pm;
  pm.values = Image2D(masks.front().width(), masks.front().height());
  pm.n_aggregated = masks.size();
  pm.mode = mode;
  std::vector<std::size_t> counts(pm.values.size(), 0);
  for (const BinaryMask& m : masks) {
    if (!m.same_shape(masks.front())) throw InvalidInput("probability map: mask shapes differ");
    for (std::size_t i = 0; i < m.size(); ++i) counts[i] += m[i] ? 1 : 0;
  }
  for (std::size_t i = 0; i < counts.size(); ++i)
    pm.values[i] = static_cast<double>(counts[i]) / static_cast<double>(masks.size());
  return pm;
}

inline BinaryMask threshold_probability_map(const ProbabilityMap& pm, double theta = 0.5) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw InvalidInput("theta must lie in [0, 1]");
  BinaryMask out(pm.values.width(), pm.values.height());
  for (std::size_t i = 0; i < out.size(); ++i) out.set(i, pm.values[i] >= theta);
  return out;
}

}  // namespace mechlearn
