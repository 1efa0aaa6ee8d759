#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/random.hpp"

namespace mechlearn {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Cumulative signal fractions alpha_bar_l for l = 0..L with alpha_bar_0 = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() : alpha_bar_{1.0} {}

  /// Takes alpha_bar_1..alpha_bar_L; alpha_bar_0 = 1 is implied.
  explicit NoiseSchedule(const std::vector<double>& alpha_bar) : alpha_bar_{1.0} {
    alpha_bar_.insert(alpha_bar_.end(), alpha_bar.begin(), alpha_bar.end());
    for (std::size_t l = 1; l < alpha_bar_.size(); ++l)
      if (!(alpha_bar_[l] > 0.0 && alpha_bar_[l] < 1.0 && alpha_bar_[l] < alpha_bar_[l - 1]))
        throw InvalidInput("alpha_bar must be strictly decreasing inside (0, 1)");
  }

  int steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }

  double alpha_bar(int l) const {
    if (l < 0 || l > steps()) throw InvalidInput("diffusion step " + std::to_string(l) + " out of range");
    return alpha_bar_[static_cast<std::size_t>(l)];
  }

  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

/// Linear beta schedule: beta_k evenly spaced in [beta_start, beta_end],
/// alpha_bar_l = prod_{k<=l} (1 - beta_k).
inline NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (steps < 1) throw InvalidInput("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidInput("beta range must satisfy 0 < beta_start <= beta_end < 1");
  std::vector<double> ab(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (int k = 0; k < steps; ++k) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * k / static_cast<double>(steps - 1);
    prod *= 1.0 - beta;
    ab[static_cast<std::size_t>(k)] = prod;
  }
  return NoiseSchedule(ab);
}

// ---------------------------------------------------------------------------
// Forward and reverse updates
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const Image2D& a, const Image2D& b, const char* what) {
  if (!a.same_shape(b)) throw InvalidInput(std::string(what) + ": image shapes differ");
}
}  // namespace detail

struct NoisedImage {
  Image2D x;
  Image2D eps;
};

/// x_l = sqrt(abar_l) x0 + sqrt(1 - abar_l) eps, eps ~ N(0, I).
inline NoisedImage forward_noise(const Image2D& x0, int l, const NoiseSchedule& sched, NormalSampler& normal) {
  if (l < 1 || l > sched.steps()) throw InvalidInput("forward_noise step must lie in [1, L]");
  const double ab = sched.alpha_bar(l);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  NoisedImage out{x0, x0};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double e = normal();
    out.eps[i] = e;
    out.x[i] = a * x0[i] + b * e;
  }
  return out;
}

inline NoisedImage forward_noise(const Image2D& x0, int l, const NoiseSchedule& sched, std::uint64_t seed) {
  NormalSampler normal(seed);
  return forward_noise(x0, l, sched, normal);
}

/// Predicted clean image (x_l - sqrt(1 - abar_l) eps) / sqrt(abar_l).
inline Image2D predict_x0(const Image2D& x_l, int l, const Image2D& eps, const NoiseSchedule& sched) {
  detail::require_same_shape(x_l, eps, "predict_x0");
  const double ab = sched.alpha_bar(l);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Image2D out = x_l;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_l[i] - b * eps[i]) / a;
  return out;
}

/// One reverse step
///   x_{l-1} = sqrt(abar_{l-1}) x0_pred + sqrt(1 - abar_{l-1} - sigma^2) eps + sigma z.
/// sigma = 0 is the deterministic DDIM update; `noise` (z) is required iff sigma > 0.
inline Image2D ddim_step(const Image2D& x_l, int l, const Image2D& eps, const NoiseSchedule& sched,
                         double sigma = 0.0, const Image2D* noise = nullptr) {
  if (l < 1 || l > sched.steps()) throw InvalidInput("ddim_step step must lie in [1, L]");
  if (!(sigma >= 0.0)) throw InvalidInput("sigma must be non-negative");
  if ((sigma > 0.0) != (noise != nullptr)) throw InvalidInput("noise image is required iff sigma > 0");
  detail::require_same_shape(x_l, eps, "ddim_step");
  if (noise) detail::require_same_shape(x_l, *noise, "ddim_step");
  const double ab = sched.alpha_bar(l);
  const double ab_prev = sched.alpha_bar(l - 1);
  const double radicand = 1.0 - ab_prev - sigma * sigma;
  if (radicand < 0.0) throw InvalidInput("sigma^2 exceeds 1 - alpha_bar_{l-1}");
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev), dir = std::sqrt(radicand);
  Image2D out = x_l;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (x_l[i] - sb * eps[i]) / sa;
    out[i] = sa_prev * x0 + dir * eps[i] + (noise ? sigma * (*noise)[i] : 0.0);
  }
  return out;
}

/// Regressor-guided noise estimate eps - s_R sqrt(1 - abar_l) grad.
inline Image2D guided_epsilon(const Image2D& eps, const Image2D& grad, double scale, double alpha_bar_l) {
  detail::require_same_shape(eps, grad, "guided_epsilon");
  const double k = scale * std::sqrt(1.0 - alpha_bar_l);
  Image2D out = eps;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - k * grad[i];
  return out;
}

// ---------------------------------------------------------------------------
// Guidance scale
// ---------------------------------------------------------------------------

struct GuidanceConfig {
  double s_ct = 50000.0;   // constant factor
  double dyn_clamp = 1.0;  // bound on |s_dyn|
  double target = 0.0;     // tumor fraction of brain area, in [0, 1)

  void validate() const {
    if (!(s_ct >= 0.0)) throw InvalidInput("s_ct must be non-negative");
    if (!(dyn_clamp > 0.0)) throw InvalidInput("dyn_clamp must be positive");
    if (!(target >= 0.0 && target < 1.0)) throw InvalidInput("target fraction must lie in [0, 1)");
  }
};

/// s_R = s_ct * clamp(target - current, -dyn_clamp, dyn_clamp). Signed, so the
/// pull vanishes at the target and reverses on overshoot.
inline double regressor_scale(const GuidanceConfig& cfg, double current) {
  const double dyn = std::clamp(cfg.target - current, -cfg.dyn_clamp, cfg.dyn_clamp);
  return cfg.s_ct * dyn;
}

// ---------------------------------------------------------------------------
// Analytic denoiser and regressor
// ---------------------------------------------------------------------------

/// Exact noise predictor when clean images are N(mu, s0^2 I):
///   eps* = sqrt(1 - abar) (x - sqrt(abar) mu) / (abar s0^2 + 1 - abar).
/// s0 = 0 collapses the prior onto mu.
inline Image2D gaussian_optimal_eps(const Image2D& x_l, int l, const NoiseSchedule& sched, const Image2D& mu,
                                    double s0) {
  if (!(s0 >= 0.0)) throw InvalidInput("s0 must be non-negative");
  detail::require_same_shape(x_l, mu, "gaussian_optimal_eps");
  const double ab = sched.alpha_bar(l);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double scale = sb / (ab * s0 * s0 + 1.0 - ab);
  Image2D out = x_l;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * (x_l[i] - sa * mu[i]);
  return out;
}

/// Exact noise predictor for a per-pixel two-component prior: with
/// probability 1 - w_i the clean pixel is N(mu_i, s0^2), with probability w_i
/// it is N(alt, s0^2). Pixels with w_i = 0 reduce to the Gaussian case.
inline Image2D mixture_optimal_eps(const Image2D& x_l, int l, const NoiseSchedule& sched, const Image2D& mu,
                                   double s0, double alt, const Image2D& weight) {
  if (!(s0 >= 0.0)) throw InvalidInput("s0 must be non-negative");
  detail::require_same_shape(x_l, mu, "mixture_optimal_eps");
  detail::require_same_shape(x_l, weight, "mixture_optimal_eps");
  const double ab = sched.alpha_bar(l);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double var = ab * s0 * s0 + 1.0 - ab;
  const double gain = sa * s0 * s0 / var;
  Image2D out = x_l;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = x_l[i];
    const double w = weight[i];
    const double m0 = mu[i] + gain * (x - sa * mu[i]);
    double x0 = m0;
    if (w > 0.0) {
      const double m1 = alt + gain * (x - sa * alt);
      const double d0 = x - sa * mu[i], d1 = x - sa * alt;
      // Posterior weight of the alternative component, via log-odds.
      const double logit = std::log(w) - std::log1p(-w) + (d0 * d0 - d1 * d1) / (2.0 * var);
      const double p = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
      x0 = (1.0 - p) * m0 + p * m1;
    }
    out[i] = (x - sa * x0) / sb;
  }
  return out;
}

struct SoftAreaSpec {
  double tau = 0.6;        // intensity threshold
  double softness = 0.02;  // logistic temperature T
  BinaryMask brain;

  void validate() const {
    if (!(softness > 0.0)) throw InvalidInput("softness must be positive");
    if (brain.empty()) throw InvalidInput("brain mask is empty");
  }
};

struct RegressorOutput {
  double value = 0.0;
  Image2D grad;
};

/// Fraction of brain pixels above tau, softened by a logistic of width T.
/// Gradient is sigma'((x - tau)/T) / (T |B|) inside the brain, zero outside.
inline RegressorOutput soft_tumor_fraction(const Image2D& x, const SoftAreaSpec& spec) {
  spec.validate();
  if (!spec.brain.same_shape(x)) throw InvalidInput("brain mask shape differs from image");
  const double n = static_cast<double>(spec.brain.count());
  RegressorOutput out{0.0, Image2D(x.width(), x.height(), x.pixel_spacing())};
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!spec.brain[i]) continue;
    const double z = (x[i] - spec.tau) / spec.softness;
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    sum += s;
    out.grad[i] = s * (1.0 - s) / (spec.softness * n);
  }
  out.value = sum / n;
  return out;
}

// ---------------------------------------------------------------------------
// Pluggable components
// ---------------------------------------------------------------------------

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  /// Noise estimate for x_l at step l.
  virtual Image2D predict_noise(const Image2D& x_l, int l) = 0;
};

class Regressor {
 public:
  virtual ~Regressor() = default;
  /// Tumor fraction and its gradient with respect to x_l. `x0_pred` is the
  /// unguided clean-image estimate at this step.
  virtual RegressorOutput evaluate(const Image2D& x_l, const Image2D& x0_pred, int l) = 0;
};

class GaussianDenoiser final : public Denoiser {
 public:
  GaussianDenoiser(NoiseSchedule sched, Image2D mean, double s0)
      : sched_(std::move(sched)), mean_(std::move(mean)), s0_(s0) {
    if (!(s0 >= 0.0)) throw InvalidInput("s0 must be non-negative");
  }
  Image2D predict_noise(const Image2D& x_l, int l) override {
    return gaussian_optimal_eps(x_l, l, sched_, mean_, s0_);
  }

 private:
  NoiseSchedule sched_;
  Image2D mean_;
  double s0_;
};

class MixtureDenoiser final : public Denoiser {
 public:
  MixtureDenoiser(NoiseSchedule sched, Image2D mean, double s0, double alt, Image2D weight)
      : sched_(std::move(sched)), mean_(std::move(mean)), weight_(std::move(weight)), s0_(s0), alt_(alt) {
    if (!(s0 >= 0.0)) throw InvalidInput("s0 must be non-negative");
    if (!std::isfinite(alt)) throw InvalidInput("alternative level must be finite");
    if (!weight_.same_shape(mean_)) throw InvalidInput("prior weight shape differs from mean image");
    for (double w : weight_.pixels())
      if (!(w >= 0.0 && w < 1.0)) throw InvalidInput("prior weights must lie in [0, 1)");
  }
  Image2D predict_noise(const Image2D& x_l, int l) override {
    return mixture_optimal_eps(x_l, l, sched_, mean_, s0_, alt_, weight_);
  }

 private:
  NoiseSchedule sched_;
  Image2D mean_;
  Image2D weight_;
  double s0_;
  double alt_;
};

/// The soft-area regressor has no notion of noise level, so it reads the
/// clean-image estimate and returns the straight-through gradient
/// d/dx_l = (d/dx0) / sqrt(abar_l).
class SoftAreaRegressor final : public Regressor {
 public:
  SoftAreaRegressor(NoiseSchedule sched, SoftAreaSpec spec) : sched_(std::move(sched)), spec_(std::move(spec)) {
    spec_.validate();
  }
  RegressorOutput evaluate(const Image2D&, const Image2D& x0_pred, int l) override {
    RegressorOutput out = soft_tumor_fraction(x0_pred, spec_);
    const double inv = 1.0 / std::sqrt(sched_.alpha_bar(l));
    for (double& g : out.grad.pixels()) g *= inv;
    return out;
  }

 private:
  NoiseSchedule sched_;
  SoftAreaSpec spec_;
};

// ---------------------------------------------------------------------------
// Guided generation
// ---------------------------------------------------------------------------

struct GenerationTrace {
  std::vector<double> regressor_values;  // one per reverse step, nl..1
  std::vector<double> scales;
};

/// Guided DDIM chain (sigma = 0) from x at step `from` down to step 0.
inline Image2D reverse_diffusion(Image2D x, int from, Denoiser& denoiser, Regressor* regressor,
                                 const GuidanceConfig& guidance, const NoiseSchedule& sched,
                                 GenerationTrace* trace = nullptr) {
  if (from < 1 || from > sched.steps()) throw InvalidInput("start step must lie in [1, L]");
  guidance.validate();
  const bool guided = regressor != nullptr && guidance.s_ct != 0.0;
  for (int l = from; l >= 1; --l) {
    Image2D eps = denoiser.predict_noise(x, l);
    if (!eps.same_shape(x) || !eps.all_finite())
      throw NumericalFailure("denoiser returned an invalid noise estimate at step " + std::to_string(l));
    if (guided) {
      const RegressorOutput r = regressor->evaluate(x, predict_x0(x, l, eps, sched), l);
      if (!r.grad.same_shape(x)) throw InvalidInput("regressor gradient shape differs from image");
      const double s = regressor_scale(guidance, r.value);
      eps = guided_epsilon(eps, r.grad, s, sched.alpha_bar(l));
      if (trace) {
        trace->regressor_values.push_back(r.value);
        trace->scales.push_back(s);
      }
    }
    x = ddim_step(x, l, eps, sched);
    if (!x.all_finite()) throw NumericalFailure("generation diverged at step " + std::to_string(l));
  }
  return x;
}

/// Forward-noises `ref` to step nl, then runs the guided chain back to step
/// 0. Deterministic for a fixed seed.
inline Image2D generate(const Image2D& ref, int nl, Denoiser& denoiser, Regressor* regressor,
                        const GuidanceConfig& guidance, const NoiseSchedule& sched, std::uint64_t seed,
                        GenerationTrace* trace = nullptr) {
  if (nl < 1 || nl > sched.steps()) throw InvalidInput("noise level must lie in [1, L]");
  guidance.validate();
  return reverse_diffusion(forward_noise(ref, nl, sched, seed).x, nl, denoiser, regressor, guidance, sched, trace);
}

}  // namespace mechlearn
