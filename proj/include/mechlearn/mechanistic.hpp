#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mechlearn/error.hpp"
#include "mechlearn/levenberg_marquardt.hpp"
#include "mechlearn/parallel.hpp"
#include "mechlearn/random.hpp"
#include "mechlearn/stats.hpp"

namespace mechlearn {

// ---------------------------------------------------------------------------
// Radiotherapy-aware tumor area model.
//
// Before RT onset the tumor grows exponentially, A(t) = A0 exp(lambda t). At
// onset it splits into a surviving fraction S that keeps growing at lambda and
// a dying fraction 1-S whose exponent is gated by a tanh switch:
//
//   A_d(t) = A_d(t_rt) exp(rate(t) (t - t_rt))
//
// Two parameterizations of rate(t) are supported, see DecayForm.
// ---------------------------------------------------------------------------

enum class DecayForm {
  /// rate(t) = -lambda_decay * tanh((t - t_rt - delay) * slope). Default.
  kIndependentRate,
  /// rate(t) = -lambda * tanh((t - t_rt - delay) / slope); lambda_decay unused.
  kGrowthCoupled,
};

inline std::string to_string(DecayForm f) {
  return f == DecayForm::kIndependentRate ? "independent-rate" : "growth-coupled";
}

inline DecayForm decay_form_from_string(const std::string& s) {
  if (s == "independent-rate") return DecayForm::kIndependentRate;
  if (s == "growth-coupled") return DecayForm::kGrowthCoupled;
  throw InvalidInput("unknown decay form '" + s + "'");
}

struct GrowthParams {
  double a0 = 1.0;            // mm^2
  double lambda = 0.0;        // 1/day
  double survival = 1.0;      // S in [0, 1]
  double lambda_decay = 0.0;  // 1/day, >= 0
  double delay = 0.0;         // days, >= 0
  double slope = 0.1;         // 1/day, > 0
  double t_rt_start = 0.0;    // days

  void validate() const {
    if (!(a0 > 0.0)) throw InvalidInput("A0 must be positive");
    if (!(survival >= 0.0 && survival <= 1.0)) throw InvalidInput("S must lie in [0, 1]");
    if (!(slope > 0.0)) throw InvalidInput("slope must be positive");
    if (!(lambda_decay >= 0.0)) throw InvalidInput("lambda_decay must be non-negative");
    if (!(delay >= 0.0)) throw InvalidInput("delay must be non-negative");
    if (!std::isfinite(lambda) || !std::isfinite(t_rt_start))
      throw InvalidInput("growth parameters must be finite");
  }

  friend bool operator==(const GrowthParams&, const GrowthParams&) = default;
};

/// Exponent rate of the dying compartment at time t >= t_rt_start.
inline double dying_rate(double t, const GrowthParams& p, DecayForm form = DecayForm::kIndependentRate) {
  const double since = t - p.t_rt_start - p.delay;
  if (form == DecayForm::kIndependentRate) return -p.lambda_decay * std::tanh(since * p.slope);
  return -p.lambda * std::tanh(since / p.slope);
}

inline double tumor_area(double t, const GrowthParams& p, DecayForm form = DecayForm::kIndependentRate) {
  if (t < p.t_rt_start) return p.a0 * std::exp(p.lambda * t);
  const double at_onset = p.a0 * std::exp(p.lambda * p.t_rt_start);
  const double dt = t - p.t_rt_start;
  const double surviving = p.survival * at_onset * std::exp(p.lambda * dt);
  const double dying = (1.0 - p.survival) * at_onset * std::exp(dying_rate(t, p, form) * dt);
  return surviving + dying;
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

struct AreaSeries {
  std::vector<double> times;  // days
  std::vector<double> areas;  // mm^2
  double t_rt_start = 0.0;    // days
  double brain_area = 0.0;    // mm^2 of the reference slice

  std::size_t size() const noexcept { return times.size(); }

  void validate() const {
    if (times.size() != areas.size()) throw InvalidInput("times and areas differ in length");
    if (times.empty()) throw InvalidInput("empty area series");
    if (!(t_rt_start >= 0.0)) throw InvalidInput("t_rt_start must be non-negative");
    if (!(brain_area > 0.0)) throw InvalidInput("brain area must be positive");
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (!(times[i] >= 0.0)) throw InvalidInput("times must be non-negative");
      if (i > 0 && !(times[i] > times[i - 1])) throw InvalidInput("times must be strictly increasing");
      if (!(areas[i] > 0.0)) throw InvalidInput("areas must be strictly positive");
      if (!(areas[i] < brain_area)) throw InvalidInput("tumor area must be below brain area");
    }
  }

  /// Copy without the last observation.
  AreaSeries without_last() const {
    AreaSeries s = *this;
    s.times.pop_back();
    s.areas.pop_back();
    return s;
  }
};

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool fixed() const noexcept { return hi - lo <= 1e-12 * std::max(1.0, std::abs(lo)); }
  double clamp(double v) const noexcept { return std::clamp(v, lo, hi); }
  friend bool operator==(const Interval&, const Interval&) = default;
};

inline constexpr std::size_t kNumFitParams = 6;

/// Box constraints on the fitted parameters. t_rt_start is taken from the
/// series and never fitted.
struct ParamBounds {
  Interval a0, lambda, survival, lambda_decay, delay, slope;

  std::array<Interval, kNumFitParams> as_array() const {
    return {a0, lambda, survival, lambda_decay, delay, slope};
  }

  void validate() const {
    for (const Interval& iv : as_array())
      if (!(iv.lo <= iv.hi) || !std::isfinite(iv.lo) || !std::isfinite(iv.hi))
        throw InvalidInput("parameter bounds must be finite with lo <= hi");
    if (!(a0.lo > 0.0)) throw InvalidInput("A0 lower bound must be positive");
    if (!(survival.lo >= 0.0 && survival.hi <= 1.0)) throw InvalidInput("S bounds must lie in [0, 1]");
    if (!(slope.lo > 0.0)) throw InvalidInput("slope lower bound must be positive");
    if (!(lambda_decay.lo >= 0.0) || !(delay.lo >= 0.0))
      throw InvalidInput("lambda_decay and delay bounds must be non-negative");
  }

  friend bool operator==(const ParamBounds&, const ParamBounds&) = default;
};

inline ParamBounds default_bounds(const AreaSeries& series) {
  if (series.areas.empty()) throw InvalidInput("empty area series");
  const double first = series.areas.front();
  return ParamBounds{
      .a0 = {0.1 * first, 10.0 * first},
      .lambda = {0.0, 0.2},
      .survival = {0.0, 1.0},
      .lambda_decay = {0.0, 0.5},
      .delay = {0.0, 120.0},
      .slope = {0.01, 1.0},
  };
}

namespace detail {

inline std::array<double, kNumFitParams> to_array(const GrowthParams& p) {
  return {p.a0, p.lambda, p.survival, p.lambda_decay, p.delay, p.slope};
}

inline GrowthParams from_array(const std::array<double, kNumFitParams>& v, double t_rt_start) {
  return GrowthParams{v[0], v[1], v[2], v[3], v[4], v[5], t_rt_start};
}

inline double logistic(double u) {
  return u >= 0.0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

/// Bounded <-> unbounded parameter mapping p = lo + (hi - lo) * logistic(u).
/// Fixed parameters (lo == hi) are removed from the free vector.
class BoundTransform {
 public:
  explicit BoundTransform(const ParamBounds& bounds) : bounds_(bounds.as_array()) {
    for (std::size_t i = 0; i < kNumFitParams; ++i)
      if (!bounds_[i].fixed()) free_.push_back(i);
  }

  std::size_t num_free() const noexcept { return free_.size(); }

  Eigen::VectorXd to_free(const std::array<double, kNumFitParams>& p) const {
    Eigen::VectorXd u(static_cast<Eigen::Index>(free_.size()));
    for (std::size_t k = 0; k < free_.size(); ++k) {
      const Interval& iv = bounds_[free_[k]];
      const double width = iv.hi - iv.lo;
      const double frac = std::clamp((p[free_[k]] - iv.lo) / width, 1e-9, 1.0 - 1e-9);
      u[static_cast<Eigen::Index>(k)] = std::log(frac / (1.0 - frac));
    }
    return u;
  }

  std::array<double, kNumFitParams> from_free(const Eigen::VectorXd& u) const {
    std::array<double, kNumFitParams> p{};
    for (std::size_t i = 0; i < kNumFitParams; ++i) p[i] = bounds_[i].lo;
    for (std::size_t k = 0; k < free_.size(); ++k) {
      const Interval& iv = bounds_[free_[k]];
      p[free_[k]] = iv.lo + (iv.hi - iv.lo) * logistic(u[static_cast<Eigen::Index>(k)]);
    }
    return p;
  }

 private:
  std::array<Interval, kNumFitParams> bounds_;
  std::vector<std::size_t> free_;
};

}  // namespace detail

struct FitOptions {
  DecayForm decay_form = DecayForm::kIndependentRate;
  LmOptions lm{};
};

struct FitResult {
  GrowthParams params;
  double residual_sse = 0.0;  // mm^4
  double r_squared = 0.0;
  bool converged = false;
  int n_iterations = 0;

  friend bool operator==(const FitResult&, const FitResult&) = default;
};

inline std::size_t min_points_for(const ParamBounds& bounds) {
  std::size_t free = 0;
  for (const Interval& iv : bounds.as_array()) free += iv.fixed() ? 0 : 1;
  return std::min<std::size_t>(3, std::max<std::size_t>(free, 1));
}

namespace detail {

inline FitResult fit_from(const AreaSeries& series, const ParamBounds& bounds,
                          const GrowthParams& start, const FitOptions& opt) {
  const BoundTransform tf(bounds);
  const double t_rt = series.t_rt_start;
  const auto n = static_cast<Eigen::Index>(series.size());
  auto residuals = [&](const Eigen::VectorXd& u) {
    const GrowthParams p = from_array(tf.from_free(u), t_rt);
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i)
      r[i] = series.areas[static_cast<std::size_t>(i)] -
             tumor_area(series.times[static_cast<std::size_t>(i)], p, opt.decay_form);
    return r;
  };

  std::array<double, kNumFitParams> start_arr = to_array(start);
  const auto bnd = bounds.as_array();
  for (std::size_t i = 0; i < kNumFitParams; ++i) start_arr[i] = bnd[i].clamp(start_arr[i]);

  const LmResult lm = levenberg_marquardt(residuals, tf.to_free(start_arr), opt.lm);

  FitResult out;
  out.params = from_array(tf.from_free(lm.x), t_rt);
  out.residual_sse = lm.sse;
  out.converged = lm.converged;
  out.n_iterations = lm.iterations;
  std::vector<double> pred(series.size());
  for (std::size_t i = 0; i < series.size(); ++i)
    pred[i] = tumor_area(series.times[i], out.params, opt.decay_form);
  out.r_squared = r_squared(series.areas, pred);
  return out;
}

// Better = converged first, then lower SSE; earlier candidate wins ties.
inline bool better_fit(const FitResult& a, const FitResult& b) {
  if (!std::isfinite(b.residual_sse)) return std::isfinite(a.residual_sse);
  if (a.converged != b.converged) return a.converged && a.residual_sse <= b.residual_sse * (1.0 + 1e-9);
  return a.residual_sse < b.residual_sse;
}

/// Deterministic starting points: log-linear growth estimate from the pre-RT
/// observations combined with a small grid over the post-RT parameters.
inline std::vector<GrowthParams> auto_starts(const AreaSeries& s, const ParamBounds& b) {
  std::vector<double> tx, ly;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.times[i] < s.t_rt_start) {
      tx.push_back(s.times[i]);
      ly.push_back(std::log(s.areas[i]));
    }
  if (tx.size() < 2) {
    tx = {s.times[0], s.times[std::min<std::size_t>(1, s.size() - 1)]};
    ly = {std::log(s.areas[0]), std::log(s.areas[std::min<std::size_t>(1, s.size() - 1)])};
  }
  double lambda = 0.0, log_a0 = ly[0];
  {
    const double n = static_cast<double>(tx.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < tx.size(); ++i) mx += tx[i], my += ly[i];
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < tx.size(); ++i) {
      sxx += (tx[i] - mx) * (tx[i] - mx);
      sxy += (tx[i] - mx) * (ly[i] - my);
    }
    if (sxx > 0.0) {
      lambda = sxy / sxx;
      log_a0 = my - lambda * mx;
    }
  }
  auto inner = [](const Interval& iv, double frac) { return iv.lo + frac * (iv.hi - iv.lo); };
  GrowthParams base;
  base.t_rt_start = s.t_rt_start;
  base.a0 = b.a0.clamp(std::exp(log_a0));
  base.lambda = b.lambda.clamp(std::max(lambda, inner(b.lambda, 0.05)));
  base.slope = inner(b.slope, 0.2);

  std::vector<GrowthParams> starts;
  for (double s_frac : {0.5, 0.2, 0.8})
    for (double delay_frac : {0.1, 0.4}) {
      GrowthParams p = base;
      p.survival = inner(b.survival, s_frac);
      p.delay = inner(b.delay, delay_frac);
      p.lambda_decay = inner(b.lambda_decay, 0.3);
      starts.push_back(p);
    }
  return starts;
}

}  // namespace detail

/// Bounded least-squares fit of the growth model to an area series.
/// With `init` empty, several deterministic starts are tried and the best kept.
inline FitResult fit_params(const AreaSeries& series, const ParamBounds& bounds,
                            const std::optional<GrowthParams>& init = std::nullopt,
                            const FitOptions& opt = {}) {
  series.validate();
  bounds.validate();
  if (series.size() < min_points_for(bounds))
    throw InvalidInput("fitting needs at least " + std::to_string(min_points_for(bounds)) +
                       " observations, got " + std::to_string(series.size()));
  if (init) {
    GrowthParams p = *init;
    p.t_rt_start = series.t_rt_start;
    return detail::fit_from(series, bounds, p, opt);
  }
  FitResult best;
  best.residual_sse = std::numeric_limits<double>::infinity();
  for (const GrowthParams& start : detail::auto_starts(series, bounds)) {
    FitResult r = detail::fit_from(series, bounds, start, opt);
    if (detail::better_fit(r, best)) best = r;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

enum class NoiseModel {
  kMultiplicative,  // A * (1 + N(0, sigma^2))
  kAdditive,        // A + N(0, sigma^2), sigma in mm^2
};

inline std::string to_string(NoiseModel m) {
  return m == NoiseModel::kMultiplicative ? "multiplicative" : "additive";
}

inline NoiseModel noise_model_from_string(const std::string& s) {
  if (s == "multiplicative") return NoiseModel::kMultiplicative;
  if (s == "additive") return NoiseModel::kAdditive;
  throw InvalidInput("unknown noise model '" + s + "'");
}

struct BootstrapOptions {
  std::size_t n = 100;
  double noise_sigma = 0.10;
  NoiseModel noise_model = NoiseModel::kMultiplicative;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  FitOptions fit{};
};

struct BootstrapEnsemble {
  std::vector<FitResult> replicates;
  double noise_sigma = 0.0;
  NoiseModel noise_model = NoiseModel::kMultiplicative;
  std::uint64_t seed = 0;
  DecayForm decay_form = DecayForm::kIndependentRate;

  std::size_t size() const noexcept { return replicates.size(); }
  std::size_t converged_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(replicates.begin(), replicates.end(),
                                                  [](const FitResult& r) { return r.converged; }));
  }
  friend bool operator==(const BootstrapEnsemble&, const BootstrapEnsemble&) = default;
};

namespace detail {

// Smallest admissible perturbed area; perturbations are clamped here.
inline constexpr double kMinPerturbedFraction = 1e-3;

inline AreaSeries perturb(const AreaSeries& s, double sigma, NoiseModel model, NormalSampler& normal) {
  AreaSeries out = s;
  for (double& a : out.areas) {
    const double z = normal();
    const double noisy = model == NoiseModel::kMultiplicative ? a * (1.0 + sigma * z) : a + sigma * z;
    a = std::min(std::max(noisy, kMinPerturbedFraction * a), 0.999 * s.brain_area);
  }
  return out;
}

inline GrowthParams random_start(const ParamBounds& b, double t_rt, NormalSampler& rng) {
  auto draw = [&](const Interval& iv) { return iv.lo + (iv.hi - iv.lo) * rng.uniform(); };
  GrowthParams p;
  p.a0 = draw(b.a0);
  p.lambda = draw(b.lambda);
  p.survival = draw(b.survival);
  p.lambda_decay = draw(b.lambda_decay);
  p.delay = draw(b.delay);
  p.slope = draw(b.slope);
  p.t_rt_start = t_rt;
  return p;
}

}  // namespace detail

/// Refits the model to `n` noise-perturbed copies of the series. Each replicate
/// starts from a uniform random point in the bounds and from the fit to the
/// unperturbed data; the better of the two is kept. Replicate i draws from a
/// stream seeded by derive_seed(seed, i), so output is independent of
/// `workers`.
inline BootstrapEnsemble bootstrap_fit(const AreaSeries& series, const ParamBounds& bounds,
                                       const BootstrapOptions& opt) {
  if (opt.n < 1) throw InvalidInput("bootstrap needs n >= 1");
  if (!(opt.noise_sigma >= 0.0)) throw InvalidInput("noise sigma must be non-negative");
  const FitResult anchor = fit_params(series, bounds, std::nullopt, opt.fit);

  BootstrapEnsemble ens;
  ens.noise_sigma = opt.noise_sigma;
  ens.noise_model = opt.noise_model;
  ens.seed = opt.seed;
  ens.decay_form = opt.fit.decay_form;
  ens.replicates.resize(opt.n);
  parallel_for(opt.n, opt.workers, [&](std::size_t i) {
    NormalSampler rng(derive_seed(opt.seed, i));
    const AreaSeries noisy = detail::perturb(series, opt.noise_sigma, opt.noise_model, rng);
    const GrowthParams start = detail::random_start(bounds, series.t_rt_start, rng);
    FitResult best = fit_params(noisy, bounds, start, opt.fit);
    FitResult warm = fit_params(noisy, bounds, anchor.params, opt.fit);
    if (detail::better_fit(warm, best)) best = warm;
    ens.replicates[i] = best;
  });
  return ens;
}

inline std::vector<double> ensemble_predictions(const BootstrapEnsemble& ens, double t) {
  std::vector<double> out;
  out.reserve(ens.size());
  for (const FitResult& r : ens.replicates) out.push_back(tumor_area(t, r.params, ens.decay_form));
  return out;
}

/// Percentiles (linear interpolation) of the ensemble's predicted area at t.
inline std::vector<double> predict_quantiles(const BootstrapEnsemble& ens, double t,
                                             const std::vector<double>& quantiles) {
  if (ens.replicates.empty()) throw InvalidInput("empty bootstrap ensemble");
  for (double q : quantiles)
    if (!(q >= 0.0 && q <= 100.0)) throw InvalidInput("quantiles must lie in [0, 100]");
  std::vector<double> pred = ensemble_predictions(ens, t);
  std::sort(pred.begin(), pred.end());
  std::vector<double> out;
  out.reserve(quantiles.size());
  for (double q : quantiles) out.push_back(percentile_sorted(pred, q));
  return out;
}

inline double predict_median(const BootstrapEnsemble& ens, double t) {
  return predict_quantiles(ens, t, {50.0}).front();
}

// ---------------------------------------------------------------------------
// Fit evaluation
// ---------------------------------------------------------------------------

enum class EvalMode {
  kAll,    // fit every observation, score the reproduction
  kTrain,  // hold out the last observation, score the extrapolation
};

struct EvaluationResult {
  double r_squared = 0.0;
  std::optional<double> nrmse;       // train mode only
  std::vector<double> median_curve;  // bootstrap median at every series time
  BootstrapEnsemble ensemble;
};

inline EvaluationResult evaluate_fit(const AreaSeries& series, EvalMode mode, const ParamBounds& bounds,
                                     const BootstrapOptions& opt) {
  series.validate();
  const std::size_t need = mode == EvalMode::kTrain ? min_points_for(bounds) + 1 : min_points_for(bounds);
  if (series.size() < need)
    throw InvalidInput("evaluation needs at least " + std::to_string(need) + " observations");

  const AreaSeries fitted = mode == EvalMode::kTrain ? series.without_last() : series;
  EvaluationResult out;
  out.ensemble = bootstrap_fit(fitted, bounds, opt);
  out.median_curve.reserve(series.size());
  for (double t : series.times) out.median_curve.push_back(predict_median(out.ensemble, t));

  const std::size_t nf = fitted.size();
  out.r_squared = r_squared(std::span<const double>(series.areas).first(nf),
                            std::span<const double>(out.median_curve).first(nf));
  if (mode == EvalMode::kTrain) {
    const double truth = series.areas.back();
    out.nrmse = std::abs(out.median_curve.back() - truth) / truth;
  }
  return out;
}

}  // namespace mechlearn
