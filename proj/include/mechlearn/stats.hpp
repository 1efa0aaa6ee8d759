#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mechlearn/error.hpp"

namespace mechlearn {

/// Percentile with linear interpolation between closest ranks:
/// position q/100 * (n-1) into the sorted sample.
inline double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InvalidInput("percentile of empty sample");
  if (!(q >= 0.0 && q <= 100.0)) throw InvalidInput("percentile must lie in [0, 100]");
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  return percentile_sorted(values, q);
}

inline double median(std::vector<double> values) { return percentile(std::move(values), 50.0); }

/// Coefficient of determination 1 - SS_res / SS_tot. Constant observations
/// give 1 for an exact fit and 0 otherwise.
inline double r_squared(std::span<const double> observed, std::span<const double> predicted) {
  if (observed.size() != predicted.size() || observed.empty())
    throw InvalidInput("r_squared needs equal, non-empty samples");
  double mean = 0.0;
  for (double v : observed) mean += v;
  mean /= static_cast<double>(observed.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    ss_res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
    ss_tot += (observed[i] - mean) * (observed[i] - mean);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

}  // namespace mechlearn
