#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/mechanistic.hpp"
#include "mechlearn/random.hpp"

namespace mechlearn {

// Synthetic longitudinal "brain + tumor" slices. The tumor is an ellipse whose
// area follows the growth model; it grows by homothety about its rear vertex,
// so every frame's mask contains the previous one and growth is one-sided
// along growth_direction. A hyperintense rim of edema sits in front of the
// tumor, marking the tissue it will grow into.

struct EllipseSpec {
  double cx = 32, cy = 32;           // pixels
  double semi_x = 26, semi_y = 28;   // pixels, axis-aligned
};

struct TumorSpec {
  double cx = 28, cy = 30;           // center at t = 0, pixels
  double dir_x = 1, dir_y = 0;       // growth direction (normalized on use)
  double eccentricity = 0.6;         // of the tumor ellipse, major axis along dir
};

struct PhantomIntensity {
  double background = 0.0;
  double brain_mean = 0.35;
  double texture_amplitude = 0.03;
  double edema_mean = 0.6;
  double edema_margin_mm = 6.0;      // rim thickness at the leading edge
  double tumor_mean = 0.8;
  double noise_sigma = 0.01;
};

struct PhantomSpec {
  int width = 64, height = 64;
  double pixel_spacing = 1.0;        // mm / pixel
  EllipseSpec brain;
  std::uint64_t texture_seed = 1;
  TumorSpec tumor;
  GrowthParams growth;
  std::vector<double> observation_times;
  PhantomIntensity intensity;

  void validate() const {
    if (width < 8 || height < 8) throw InvalidInput("phantom canvas too small");
    if (!(pixel_spacing > 0.0)) throw InvalidInput("pixel spacing must be positive");
    if (!(brain.semi_x > 0.0 && brain.semi_y > 0.0)) throw InvalidInput("brain semi-axes must be positive");
    if (!(tumor.eccentricity >= 0.0 && tumor.eccentricity < 1.0))
      throw InvalidInput("tumor eccentricity must lie in [0, 1)");
    if (std::hypot(tumor.dir_x, tumor.dir_y) == 0.0) throw InvalidInput("growth direction must be nonzero");
    if (!(intensity.tumor_mean > intensity.brain_mean))
      throw InvalidInput("tumor must be hyperintense relative to brain");
    if (!(intensity.noise_sigma >= 0.0) || !(intensity.edema_margin_mm >= 0.0))
      throw InvalidInput("noise sigma and edema margin must be non-negative");
    if (observation_times.empty()) throw InvalidInput("phantom needs observation times");
    for (std::size_t i = 1; i < observation_times.size(); ++i)
      if (!(observation_times[i] > observation_times[i - 1]))
        throw InvalidInput("observation times must be increasing");
    growth.validate();
  }
};

struct PhantomFrame {
  double t = 0.0;
  Image2D image;
  BinaryMask tumor;
  double area_mm2 = 0.0;       // model area
  double mask_area_mm2 = 0.0;  // rasterized area
};

inline BinaryMask brain_mask(const PhantomSpec& spec) {
  BinaryMask m(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double dx = (x - spec.brain.cx) / spec.brain.semi_x;
      const double dy = (y - spec.brain.cy) / spec.brain.semi_y;
      m.set(x, y, dx * dx + dy * dy <= 1.0);
    }
  return m;
}

namespace detail {

struct TumorGeometry {
  double ux, uy;          // unit growth direction
  double anchor_x, anchor_y;
  double minor_ratio;     // b / a

  TumorGeometry(const PhantomSpec& spec) {
    const double n = std::hypot(spec.tumor.dir_x, spec.tumor.dir_y);
    ux = spec.tumor.dir_x / n;
    uy = spec.tumor.dir_y / n;
    minor_ratio = std::sqrt(1.0 - spec.tumor.eccentricity * spec.tumor.eccentricity);
    const double area0 = tumor_area(0.0, spec.growth) / (spec.pixel_spacing * spec.pixel_spacing);
    const double a0 = std::sqrt(area0 / (3.14159265358979323846 * minor_ratio));
    anchor_x = spec.tumor.cx - a0 * ux;
    anchor_y = spec.tumor.cy - a0 * uy;
  }

  // Smallest semi-major axis whose ellipse (rear vertex at the anchor)
  // contains pixel (x, y); infinity behind the anchor.
  double reach(int x, int y) const {
    const double dx = x - anchor_x, dy = y - anchor_y;
    const double along = dx * ux + dy * uy;
    const double across = -dx * uy + dy * ux;
    if (along <= 0.0) return std::numeric_limits<double>::infinity();
    return (along * along + across * across / (minor_ratio * minor_ratio)) / (2.0 * along);
  }

  bool inside(double a, int x, int y) const { return a > 0.0 && reach(x, y) <= a; }

  BinaryMask raster(double a, int w, int h) const {
    BinaryMask m(w, h);
    if (a <= 0.0) return m;
    const double cx = anchor_x + a * ux, cy = anchor_y + a * uy;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - a - 1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + a + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - a - 1)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + a + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (inside(a, x, y)) m.set(x, y, true);
    return m;
  }

  // Semi-major axis whose raster pixel count is closest to `pixels`.
  double semi_major_for(double pixels, int w, int h) const {
    const double guess = std::sqrt(pixels / (3.14159265358979323846 * minor_ratio));
    double lo = 0.0, hi = 2.0 * guess + 2.0;
    for (int i = 0; i < 60; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (static_cast<double>(raster(mid, w, h).count()) < pixels) lo = mid;
      else hi = mid;
    }
    const double below = static_cast<double>(raster(lo, w, h).count());
    const double above = static_cast<double>(raster(hi, w, h).count());
    return (pixels - below <= above - pixels) ? lo : hi;
  }
};

}  // namespace detail

/// Renders one frame per observation time. Noise for frame k is drawn from
/// derive_seed(seed, k); the texture depends only on spec.texture_seed.
inline std::vector<PhantomFrame> generate_phantom_series(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const BinaryMask brain = brain_mask(spec);
  const detail::TumorGeometry geom(spec);
  const double px_area = spec.pixel_spacing * spec.pixel_spacing;

  // Smooth texture: a few random plane waves.
  NormalSampler tex_rng(spec.texture_seed);
  struct Wave { double fx, fy, phase, amp; };
  std::vector<Wave> waves;
  for (int k = 0; k < 4; ++k)
    waves.push_back({0.05 + 0.25 * tex_rng.uniform(), 0.05 + 0.25 * tex_rng.uniform(),
                     6.283185307179586 * tex_rng.uniform(), 0.5 + 0.5 * tex_rng.uniform()});
  Image2D texture(spec.width, spec.height, spec.pixel_spacing);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      double v = 0.0;
      for (const Wave& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      texture(x, y) = spec.intensity.texture_amplitude * v / static_cast<double>(waves.size());
    }

  const double margin_px = spec.intensity.edema_margin_mm / spec.pixel_spacing;
  std::vector<PhantomFrame> frames;
  for (std::size_t k = 0; k < spec.observation_times.size(); ++k) {
    const double t = spec.observation_times[k];
    PhantomFrame f;
    f.t = t;
    f.area_mm2 = tumor_area(t, spec.growth);
    const double a = geom.semi_major_for(f.area_mm2 / px_area, spec.width, spec.height);
    f.tumor = geom.raster(a, spec.width, spec.height);
    if (!brain.contains(f.tumor))
      throw InvalidInput("tumor leaves the brain at t = " + std::to_string(t) + " days");
    f.mask_area_mm2 = static_cast<double>(f.tumor.count()) * px_area;

    NormalSampler noise(derive_seed(seed, k));
    f.image = Image2D(spec.width, spec.height, spec.pixel_spacing, spec.intensity.background);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * spec.width + x;
        double v = spec.intensity.background;
        if (brain[i]) {
          v = spec.intensity.brain_mean;
          // Edema fades linearly from the tumor edge to normal tissue.
          const double ahead = geom.reach(x, y) - a;
          if (margin_px > 0.0 && ahead > 0.0 && ahead < margin_px)
            v = spec.intensity.edema_mean - (spec.intensity.edema_mean - spec.intensity.brain_mean) * ahead / margin_px;
          if (f.tumor[i]) v = spec.intensity.tumor_mean;
          v += texture[i];
        }
        v += spec.intensity.noise_sigma * noise();
        f.image[i] = std::clamp(v, 0.0, 1.0);
      }
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace mechlearn
