#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/stats.hpp"

namespace mechlearn {

// ---------------------------------------------------------------------------
// Otsu threshold
// ---------------------------------------------------------------------------

/// Threshold maximizing the between-class variance of an n_bins histogram
/// spanning [min, max]. Candidates are the interior bin edges; class means use
/// bin centers; ties go to the lowest edge. Pixels strictly above the returned
/// value form the foreground.
inline double otsu_threshold(const Image2D& img, int n_bins = 256) {
  if (n_bins < 2) throw InvalidInput("otsu needs at least two bins");
  const auto [mn_it, mx_it] = std::minmax_element(img.pixels().begin(), img.pixels().end());
  const double mn = *mn_it, mx = *mx_it;
  if (!(mx > mn)) throw DegenerateInput("otsu threshold of a constant image");
  const double width = (mx - mn) / n_bins;

  std::vector<double> hist(static_cast<std::size_t>(n_bins), 0.0);
  for (double v : img.pixels()) {
    const int b = std::min(n_bins - 1, static_cast<int>((v - mn) / (mx - mn) * n_bins));
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  const double total = static_cast<double>(img.size());
  double total_sum = 0.0;
  for (int b = 0; b < n_bins; ++b) total_sum += hist[static_cast<std::size_t>(b)] * (mn + (b + 0.5) * width);

  double best = -1.0;
  int best_k = 1;
  double w0 = 0.0, s0 = 0.0;
  for (int k = 1; k < n_bins; ++k) {
    w0 += hist[static_cast<std::size_t>(k - 1)];
    s0 += hist[static_cast<std::size_t>(k - 1)] * (mn + (k - 0.5) * width);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = s0 / w0, m1 = (total_sum - s0) / w1;
    const double between = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return mn + best_k * width;
}

// ---------------------------------------------------------------------------
// Morphology
// ---------------------------------------------------------------------------

inline BinaryMask dilate3x3(const BinaryMask& m) {
  BinaryMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      bool hit = false;
      for (int dy = -1; dy <= 1 && !hit; ++dy)
        for (int dx = -1; dx <= 1 && !hit; ++dx) {
          const int xx = x + dx, yy = y + dy;
          hit = xx >= 0 && yy >= 0 && xx < m.width() && yy < m.height() && m(xx, yy);
        }
      out.set(x, y, hit);
    }
  return out;
}

struct DilationResult {
  BinaryMask mask;
  bool saturated = false;  // whole image covered before the area doubled
  int iterations = 0;
};

/// Repeated 8-connected dilation until the area at least doubles.
inline DilationResult dilate_to_double_area(const BinaryMask& mask) {
  const std::size_t original = mask.count();
  if (original == 0) throw InvalidInput("cannot dilate an empty mask");
  DilationResult r{mask, false, 0};
  while (r.mask.count() < 2 * original) {
    if (r.mask.count() == r.mask.size()) {
      r.saturated = true;
      break;
    }
    r.mask = dilate3x3(r.mask);
    ++r.iterations;
  }
  return r;
}

/// Mask pixels with at least one 8-neighbor outside the mask (or the image).
inline std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      if (!m(x, y)) continue;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy)
        for (int dx = -1; dx <= 1 && !edge; ++dx) {
          const int xx = x + dx, yy = y + dy;
          edge = xx < 0 || yy < 0 || xx >= m.width() || yy >= m.height() || !m(xx, yy);
        }
      if (edge) out.emplace_back(x, y);
    }
  return out;
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

struct SsimOptions {
  int window = 7;           // odd, uniform weights
  double data_range = 1.0;
  double k1 = 0.01, k2 = 0.03;
};

/// Per-pixel SSIM for every window fully inside the image (population
/// statistics). Pixels whose window would leave the image are NaN.
inline Image2D ssim_map(const Image2D& a, const Image2D& b, const SsimOptions& opt = {}) {
  if (!a.same_shape(b)) throw InvalidInput("ssim: image shapes differ");
  if (opt.window < 1 || opt.window % 2 == 0) throw InvalidInput("ssim window must be odd");
  const int w = a.width(), h = a.height(), r = opt.window / 2;
  const double c1 = (opt.k1 * opt.data_range) * (opt.k1 * opt.data_range);
  const double c2 = (opt.k2 * opt.data_range) * (opt.k2 * opt.data_range);

  // Summed-area tables with a zero row/column in front.
  const std::size_t sw = static_cast<std::size_t>(w) + 1;
  std::vector<double> sa(sw * (h + 1)), sb(sa.size()), saa(sa.size()), sbb(sa.size()), sab(sa.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = (y + 1) * sw + (x + 1), up = y * sw + (x + 1), left = (y + 1) * sw + x,
                        diag = y * sw + x;
      const double va = a(x, y), vb = b(x, y);
      sa[i] = va + sa[up] + sa[left] - sa[diag];
      sb[i] = vb + sb[up] + sb[left] - sb[diag];
      saa[i] = va * va + saa[up] + saa[left] - saa[diag];
      sbb[i] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
      sab[i] = va * vb + sab[up] + sab[left] - sab[diag];
    }
  auto box = [&](const std::vector<double>& s, int x, int y) {
    const std::size_t x0 = x - r, x1 = x + r + 1, y0 = y - r, y1 = y + r + 1;
    return s[y1 * sw + x1] - s[y0 * sw + x1] - s[y1 * sw + x0] + s[y0 * sw + x0];
  };

  const double n = static_cast<double>(opt.window) * opt.window;
  Image2D out(w, h, a.pixel_spacing(), std::numeric_limits<double>::quiet_NaN());
  for (int y = r; y < h - r; ++y)
    for (int x = r; x < w - r; ++x) {
      const double ma = box(sa, x, y) / n, mb = box(sb, x, y) / n;
      const double va = std::max(0.0, box(saa, x, y) / n - ma * ma);
      const double vb = std::max(0.0, box(sbb, x, y) / n - mb * mb);
      const double cov = box(sab, x, y) / n - ma * mb;
      out(x, y) = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return out;
}

/// Mean SSIM over the window centers that lie in `region`.
inline double ssim_region(const Image2D& a, const Image2D& b, const BinaryMask& region,
                          const SsimOptions& opt = {}) {
  if (!region.same_shape(a)) throw InvalidInput("ssim: region shape differs from images");
  if (region.count() < static_cast<std::size_t>(opt.window) * opt.window)
    throw DegenerateInput("ssim region is smaller than one window");
  const Image2D map = ssim_map(a, b, opt);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (region[i] && !std::isnan(map[i])) {
      sum += map[i];
      ++n;
    }
  if (n == 0) throw DegenerateInput("ssim region has no complete window");
  return sum / static_cast<double>(n);
}

inline BinaryMask invert(const BinaryMask& m) {
  BinaryMask out(m.width(), m.height());
  for (std::size_t i = 0; i < m.size(); ++i) out.set(i, !m[i]);
  return out;
}

// ---------------------------------------------------------------------------
// HD95
// ---------------------------------------------------------------------------

namespace detail {
inline double directed_percentile(const std::vector<std::pair<int, int>>& from,
                                  const std::vector<std::pair<int, int>>& to, double q) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& [x, y] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [u, v] : to) {
      const double dx = x - u, dy = y - v;
      best = std::min(best, dx * dx + dy * dy);
    }
    d.push_back(std::sqrt(best));
  }
  return percentile(std::move(d), q);
}
}  // namespace detail

/// Symmetric 95th-percentile boundary distance in mm.
inline double hd95(const BinaryMask& a, const BinaryMask& b, double spacing = 1.0) {
  if (!a.same_shape(b)) throw InvalidInput("hd95: mask shapes differ");
  if (a.empty() || b.empty()) throw InvalidInput("hd95 needs non-empty masks");
  const auto ba = boundary_pixels(a), bb = boundary_pixels(b);
  return std::max(detail::directed_percentile(ba, bb, 95.0), detail::directed_percentile(bb, ba, 95.0)) * spacing;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  std::size_t n = 0;       // nonzero differences
  double p_two_sided = 1.0;
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMax = 20;

/// Mid-ranks of |d| (1-based).
inline std::vector<double> signed_rank_ranks(std::span<const double> abs_d) {
  std::vector<std::size_t> idx(abs_d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t p, std::size_t q) { return abs_d[p] < abs_d[q]; });
  std::vector<double> ranks(abs_d.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && abs_d[idx[j + 1]] == abs_d[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

/// Null distribution of 2*W+ under random signs: entry s is P(2 W+ = s).
/// Ranks must be multiples of 1/2.
inline std::vector<double> wilcoxon_null_distribution(std::span<const double> ranks) {
  std::size_t total = 0;
  std::vector<std::size_t> doubled;
  for (double r : ranks) {
    doubled.push_back(static_cast<std::size_t>(std::lround(2.0 * r)));
    total += doubled.back();
  }
  std::vector<double> counts(total + 1, 0.0);
  counts[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t r2 : doubled) {
    for (std::size_t s = reach + 1; s-- > 0;) counts[s + r2] += counts[s];
    reach += r2;
  }
  const double scale = std::ldexp(1.0, -static_cast<int>(ranks.size()));
  for (double& c : counts) c *= scale;
  return counts;
}

/// Paired two-sided test. Zero differences are dropped; ties get mid-ranks.
/// Exact null distribution up to 20 pairs, continuity-corrected normal
/// approximation (with tie correction) beyond.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidInput("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  if (d.empty()) throw DegenerateInput("wilcoxon: all differences are zero");
  if (d.size() < 5) throw InvalidInput("wilcoxon needs at least 5 nonzero differences");

  std::vector<double> absd(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) absd[i] = std::abs(d[i]);
  const std::vector<double> ranks = signed_rank_ranks(absd);

  WilcoxonResult res;
  res.n = d.size();
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? res.w_plus : res.w_minus) += ranks[i];
  res.statistic = std::min(res.w_plus, res.w_minus);
  const double nn = static_cast<double>(res.n);

  if (res.n <= kWilcoxonExactMax) {
    res.exact = true;
    const std::vector<double> pmf = wilcoxon_null_distribution(ranks);
    const auto w2 = static_cast<std::size_t>(std::lround(2.0 * res.w_plus));
    double lower = 0.0, upper = 0.0;
    for (std::size_t s = 0; s < pmf.size(); ++s) {
      if (s <= w2) lower += pmf[s];
      if (s >= w2) upper += pmf[s];
    }
    res.p_two_sided = std::min(1.0, 2.0 * std::min(lower, upper));
    return res;
  }

  const double mean = nn * (nn + 1) / 4.0;
  double var = nn * (nn + 1) * (2 * nn + 1) / 24.0;
  std::vector<double> sorted = absd;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  const double z = std::max(0.0, std::abs(res.w_plus - mean) - 0.5) / std::sqrt(var);
  res.p_two_sided = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

}  // namespace mechlearn
