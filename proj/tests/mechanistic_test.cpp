#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mechlearn/mechanistic.hpp"

namespace ml = mechlearn;

namespace {

// Second, independently written evaluation of the piecewise model in long
// double. Used as the oracle for tumor_area.
long double reference_area(long double t, long double a0, long double lambda, long double s,
                           long double lambda_decay, long double delay, long double slope,
                           long double t_rt, bool coupled = false) {
  if (t < t_rt) return a0 * expl(lambda * t);
  const long double onset = a0 * expl(lambda * t_rt);
  const long double tau = t - t_rt;
  const long double rate = coupled ? -lambda * tanhl((tau - delay) / slope)
                                   : -lambda_decay * tanhl((tau - delay) * slope);
  return s * onset * expl(lambda * tau) + (1.0L - s) * onset * expl(rate * tau);
}

ml::GrowthParams example_params() {
  return ml::GrowthParams{.a0 = 100, .lambda = 0.02, .survival = 0.4, .lambda_decay = 0.05,
                          .delay = 10, .slope = 0.2, .t_rt_start = 30};
}

ml::GrowthParams truth_params() {
  return ml::GrowthParams{.a0 = 50, .lambda = 0.015, .survival = 0.5, .lambda_decay = 0.04,
                          .delay = 15, .slope = 0.1, .t_rt_start = 30};
}

ml::AreaSeries synthetic_series(const ml::GrowthParams& p, std::vector<double> times) {
  ml::AreaSeries s;
  s.times = std::move(times);
  s.t_rt_start = p.t_rt_start;
  s.brain_area = 20000;
  for (double t : s.times) s.areas.push_back(ml::tumor_area(t, p));
  return s;
}

// Two observations before onset and six after, so that the post-onset
// parameters stay identifiable with the last point held out.
std::vector<double> eight_times() { return {0, 20, 35, 50, 65, 80, 100, 120}; }

ml::GrowthParams random_params(ml::NormalSampler& rng) {
  ml::GrowthParams p;
  p.a0 = 10 + 200 * rng.uniform();
  p.lambda = -0.01 + 0.05 * rng.uniform();
  p.survival = rng.uniform();
  p.lambda_decay = 0.2 * rng.uniform();
  p.delay = 60 * rng.uniform();
  p.slope = 0.01 + rng.uniform();
  p.t_rt_start = 5 + 60 * rng.uniform();
  return p;
}

}  // namespace

TEST(TumorArea, StartsAtA0) {
  EXPECT_DOUBLE_EQ(ml::tumor_area(0.0, example_params()), 100.0);
}

TEST(TumorArea, FullSurvivalIsPureExponential) {
  ml::GrowthParams p = example_params();
  p.survival = 1.0;
  p.lambda = 0.01;
  EXPECT_NEAR(ml::tumor_area(60.0, p), 100.0 * std::exp(0.6), 1e-12);
}

TEST(TumorArea, MatchesIndependentEvaluation) {
  const ml::GrowthParams p = example_params();
  // High-precision value of the same expression (30 significant digits).
  constexpr double kExpected = 157.223410617088247109498430584;
  EXPECT_NEAR(ml::tumor_area(60.0, p), kExpected, 1e-11);
  EXPECT_NEAR(ml::tumor_area(60.0, p),
              static_cast<double>(reference_area(60, 100, 0.02, 0.4, 0.05, 10, 0.2, 30)), 1e-11);
}

TEST(TumorArea, GrowthCoupledDecayForm) {
  constexpr double kExpected = 192.804676909461899581230697184;
  EXPECT_NEAR(ml::tumor_area(60.0, example_params(), ml::DecayForm::kGrowthCoupled), kExpected, 1e-10);
}

TEST(TumorArea, RandomParamsAgreeWithReference) {
  ml::NormalSampler rng(7);
  for (int k = 0; k < 200; ++k) {
    const ml::GrowthParams p = random_params(rng);
    const double t = 150 * rng.uniform();
    for (auto form : {ml::DecayForm::kIndependentRate, ml::DecayForm::kGrowthCoupled}) {
      const long double ref = reference_area(t, p.a0, p.lambda, p.survival, p.lambda_decay, p.delay,
                                             p.slope, p.t_rt_start, form == ml::DecayForm::kGrowthCoupled);
      EXPECT_NEAR(ml::tumor_area(t, p, form), static_cast<double>(ref), 1e-10 * static_cast<double>(ref));
    }
  }
}

TEST(TumorAreaProperty, ContinuousAtOnset) {
  ml::NormalSampler rng(11);
  for (int k = 0; k < 200; ++k) {
    const ml::GrowthParams p = random_params(rng);
    const double before = ml::tumor_area(p.t_rt_start - 1e-9, p);
    const double after = ml::tumor_area(p.t_rt_start + 1e-9, p);
    EXPECT_NEAR(before, after, 1e-6 * before);
  }
}

TEST(TumorAreaProperty, PreOnsetIncreasingForPositiveRate) {
  ml::NormalSampler rng(12);
  for (int k = 0; k < 100; ++k) {
    ml::GrowthParams p = random_params(rng);
    p.lambda = 0.001 + 0.04 * rng.uniform();
    double prev = ml::tumor_area(0.0, p);
    for (double t = 0.5; t < p.t_rt_start; t += 0.5) {
      const double a = ml::tumor_area(t, p);
      ASSERT_GT(a, prev);
      prev = a;
    }
  }
}

TEST(TumorAreaProperty, FullSurvivalEverywhere) {
  ml::NormalSampler rng(13);
  for (int k = 0; k < 100; ++k) {
    ml::GrowthParams p = random_params(rng);
    p.survival = 1.0;
    for (double t = 0; t < 200; t += 7.3)
      EXPECT_NEAR(ml::tumor_area(t, p), p.a0 * std::exp(p.lambda * t), 1e-10 * p.a0 * std::exp(p.lambda * t));
  }
}

TEST(TumorAreaProperty, NoSurvivorsDecaysTowardZero) {
  ml::GrowthParams p = example_params();
  p.survival = 0.0;
  const double at_onset = ml::tumor_area(p.t_rt_start, p);
  double prev = at_onset;
  for (double t = p.t_rt_start + p.delay + 20; t < 1000; t += 50) {
    const double a = ml::tumor_area(t, p);
    EXPECT_LT(a, prev);
    prev = a;
  }
  EXPECT_LT(prev, 1e-12 * at_onset);
}

// Closed form against RK4 integration of dA/dt, where the dying compartment
// obeys dA_d/dt = A_d * (rate(t) + (t - t_rt) * rate'(t)).
TEST(TumorAreaProperty, AgreesWithOdeIntegration) {
  ml::NormalSampler rng(14);
  for (int k = 0; k < 20; ++k) {
    const ml::GrowthParams p = random_params(rng);
    auto rate = [&](double t) { return -p.lambda_decay * std::tanh((t - p.t_rt_start - p.delay) * p.slope); };
    auto rate_dot = [&](double t) {
      const double th = std::tanh((t - p.t_rt_start - p.delay) * p.slope);
      return -p.lambda_decay * p.slope * (1.0 - th * th);
    };
    auto d_dying = [&](double t, double ad) { return ad * (rate(t) + (t - p.t_rt_start) * rate_dot(t)); };

    const double onset = p.a0 * std::exp(p.lambda * p.t_rt_start);
    double surviving = p.survival * onset;
    double dying = (1.0 - p.survival) * onset;
    const double h = 1e-3;
    const double t_end = p.t_rt_start + 120.0;
    double t = p.t_rt_start;
    int step = 0;
    while (t < t_end - 1e-12) {
      const double k1 = d_dying(t, dying);
      const double k2 = d_dying(t + h / 2, dying + h / 2 * k1);
      const double k3 = d_dying(t + h / 2, dying + h / 2 * k2);
      const double k4 = d_dying(t + h, dying + h * k3);
      dying += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
      const double g = p.lambda;
      surviving *= 1 + h * g + std::pow(h * g, 2) / 2 + std::pow(h * g, 3) / 6 + std::pow(h * g, 4) / 24;
      ++step;
      t = p.t_rt_start + step * h;
      if (step % 5000 == 0) {
        const double closed = ml::tumor_area(t, p);
        EXPECT_NEAR(surviving + dying, closed, 1e-6 * closed) << "t=" << t;
      }
    }
  }
}

TEST(FitParams, RecoversNoiselessParameters) {
  const ml::GrowthParams truth = truth_params();
  const ml::AreaSeries s = synthetic_series(truth, eight_times());
  const ml::FitResult fit = ml::fit_params(s, ml::default_bounds(s));
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.params.lambda, truth.lambda, 0.01 * truth.lambda);
  EXPECT_NEAR(fit.params.a0, truth.a0, 0.01 * truth.a0);
  EXPECT_GE(fit.r_squared, 0.999);
  EXPECT_LE(fit.residual_sse, 1e-6);
  EXPECT_EQ(fit.params.t_rt_start, truth.t_rt_start);
}

TEST(FitParams, TwoPointExponential) {
  ml::AreaSeries s;
  s.times = {0, 10};
  s.areas = {100, 100 * std::exp(0.1)};
  s.t_rt_start = 1000;  // both points before onset
  s.brain_area = 20000;
  ml::ParamBounds b = ml::default_bounds(s);
  b.survival = {1, 1};
  b.lambda_decay = {0, 0};
  b.delay = {0, 0};
  b.slope = {0.1, 0.1};
  const ml::FitResult fit = ml::fit_params(s, b);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.params.lambda, 0.01, 1e-7);
  EXPECT_NEAR(fit.params.a0, 100.0, 1e-5);
}

TEST(FitParams, ConstantPreOnsetData) {
  ml::AreaSeries s;
  s.times = {0, 10, 20, 30, 40};
  s.areas = {80, 80, 80, 80, 80};
  s.t_rt_start = 100;
  s.brain_area = 20000;
  const ml::FitResult fit = ml::fit_params(s, ml::default_bounds(s));
  EXPECT_NEAR(fit.params.lambda, 0.0, 1e-4);
  EXPECT_NEAR(fit.params.a0, 80.0, 0.05);
}

TEST(FitParams, RespectsBounds) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  ml::ParamBounds b = ml::default_bounds(s);
  b.lambda = {0.0, 0.01};  // truth lies outside
  const ml::FitResult fit = ml::fit_params(s, b);
  EXPECT_LE(fit.params.lambda, 0.01);
  EXPECT_GE(fit.params.lambda, 0.0);
  for (const auto& [v, iv] : {std::pair{fit.params.survival, b.survival}, {fit.params.delay, b.delay},
                              {fit.params.slope, b.slope}, {fit.params.a0, b.a0}}) {
    EXPECT_GE(v, iv.lo);
    EXPECT_LE(v, iv.hi);
  }
}

TEST(FitParams, RejectsTooFewPoints) {
  ml::AreaSeries s = synthetic_series(truth_params(), {0, 10});
  EXPECT_THROW(ml::fit_params(s, ml::default_bounds(s)), ml::InvalidInput);
}

TEST(FitParams, RejectsMalformedBounds) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  ml::ParamBounds b = ml::default_bounds(s);
  b.delay = {10, 5};
  EXPECT_THROW(ml::fit_params(s, b), ml::InvalidInput);
}

TEST(FitParams, RejectsInvalidSeries) {
  ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  s.times[3] = s.times[2];
  EXPECT_THROW(ml::fit_params(s, ml::default_bounds(s)), ml::InvalidInput);
  s = synthetic_series(truth_params(), eight_times());
  s.areas[1] = -1;
  EXPECT_THROW(ml::fit_params(s, ml::default_bounds(s)), ml::InvalidInput);
  s = synthetic_series(truth_params(), eight_times());
  s.brain_area = 10;
  EXPECT_THROW(ml::fit_params(s, ml::default_bounds(s)), ml::InvalidInput);
}

TEST(FitParams, ReportsNonConvergence) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  ml::FitOptions opt;
  opt.lm.max_iterations = 1;
  ml::GrowthParams far = truth_params();
  far.lambda = 0.15;
  far.survival = 0.05;
  const ml::FitResult rough = ml::fit_params(s, ml::default_bounds(s), far, opt);
  EXPECT_FALSE(rough.converged);
  EXPECT_EQ(rough.n_iterations, 1);
  EXPECT_TRUE(std::isfinite(rough.residual_sse));
}

TEST(Bootstrap, ZeroNoiseReproducesSingleFit) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const ml::ParamBounds b = ml::default_bounds(s);
  const ml::FitResult single = ml::fit_params(s, b);
  const ml::BootstrapEnsemble ens = ml::bootstrap_fit(s, b, {.n = 5, .noise_sigma = 0.0, .seed = 3});
  ASSERT_EQ(ens.size(), 5u);
  for (const ml::FitResult& r : ens.replicates) {
    EXPECT_NEAR(r.params.lambda, single.params.lambda, 1e-6);
    EXPECT_NEAR(r.params.a0, single.params.a0, 1e-4);
    for (double t : {0.0, 45.0, 100.0, 140.0})
      EXPECT_NEAR(ml::tumor_area(t, r.params), ml::tumor_area(t, single.params), 1e-4);
  }
}

TEST(Bootstrap, SameSeedIsBitwiseIdentical) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const ml::ParamBounds b = ml::default_bounds(s);
  const ml::BootstrapOptions opt{.n = 8, .noise_sigma = 0.1, .seed = 42};
  const auto a = ml::bootstrap_fit(s, b, opt);
  const auto c = ml::bootstrap_fit(s, b, opt);
  EXPECT_EQ(a, c);
  ml::BootstrapOptions threaded = opt;
  threaded.workers = 4;
  EXPECT_EQ(ml::bootstrap_fit(s, b, threaded), a);
  ml::BootstrapOptions other = opt;
  other.seed = 43;
  EXPECT_NE(ml::bootstrap_fit(s, b, other), a);
}

TEST(Bootstrap, HundredReplicateEnsemble) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const ml::ParamBounds b = ml::default_bounds(s);
  const auto ens = ml::bootstrap_fit(s, b, {.n = 100, .noise_sigma = 0.10, .seed = 1});
  ASSERT_EQ(ens.size(), 100u);
  for (const auto& r : ens.replicates) {
    EXPECT_NO_THROW(r.params.validate());
    EXPECT_GE(r.params.lambda, b.lambda.lo);
    EXPECT_LE(r.params.lambda, b.lambda.hi);
  }
  const auto ci = ml::predict_quantiles(ens, 110.0, {2.5, 50, 97.5});
  EXPECT_LT(ci[0], ci[1]);
  EXPECT_LT(ci[1], ci[2]);
}

TEST(Bootstrap, RejectsBadOptions) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  EXPECT_THROW(ml::bootstrap_fit(s, ml::default_bounds(s), {.n = 0}), ml::InvalidInput);
  EXPECT_THROW(ml::bootstrap_fit(s, ml::default_bounds(s), {.n = 2, .noise_sigma = -0.1}), ml::InvalidInput);
}

TEST(PredictQuantiles, DegenerateEnsemble) {
  ml::BootstrapEnsemble ens;
  ml::FitResult r;
  r.params = example_params();
  ens.replicates.assign(10, r);
  const double single = ml::tumor_area(75.0, r.params);
  for (double v : ml::predict_quantiles(ens, 75.0, {0, 2.5, 50, 97.5, 100})) EXPECT_DOUBLE_EQ(v, single);
}

TEST(PredictQuantiles, MatchesSortAndInterpolateOracle) {
  ml::BootstrapEnsemble ens;
  std::vector<double> preds;
  // Replicates whose prediction at t=0 equals k, inserted in scrambled order.
  for (int i = 0; i < 100; ++i) {
    const int k = 1 + (i * 37) % 100;
    ml::FitResult r;
    r.params.a0 = k;
    r.params.t_rt_start = 50;
    ens.replicates.push_back(r);
    preds.push_back(k);
  }
  auto oracle = [](std::vector<double> v, double q) {
    // bubble sort, then interpolate at rank q/100*(n-1)
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = 0; j + 1 < v.size() - i; ++j)
        if (v[j] > v[j + 1]) std::swap(v[j], v[j + 1]);
    const double rank = q / 100.0 * (v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (rank - lo) * (v[lo + 1] - v[lo]);
  };
  const auto got = ml::predict_quantiles(ens, 0.0, {90, 2.5, 97.5, 50});
  EXPECT_NEAR(got[0], oracle(preds, 90), 1e-12);
  EXPECT_NEAR(got[0], 90.1, 1e-12);
  EXPECT_NEAR(got[1], oracle(preds, 2.5), 1e-12);
  EXPECT_NEAR(got[2], oracle(preds, 97.5), 1e-12);
  EXPECT_NEAR(got[3], 50.5, 1e-12);
}

TEST(PredictQuantiles, MonotoneInQuantile) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const auto ens = ml::bootstrap_fit(s, ml::default_bounds(s), {.n = 30, .noise_sigma = 0.2, .seed = 9});
  std::vector<double> qs;
  for (double q = 0; q <= 100; q += 2.5) qs.push_back(q);
  for (double t : {20.0, 60.0, 130.0}) {
    const auto v = ml::predict_quantiles(ens, t, qs);
    EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
  }
}

TEST(PredictQuantiles, Errors) {
  ml::BootstrapEnsemble empty;
  EXPECT_THROW(ml::predict_quantiles(empty, 1.0, {50}), ml::InvalidInput);
  ml::BootstrapEnsemble one;
  one.replicates.resize(1);
  EXPECT_THROW(ml::predict_quantiles(one, 1.0, {101}), ml::InvalidInput);
}

TEST(EvaluateFit, AllModeSelfConsistent) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const auto ev = ml::evaluate_fit(s, ml::EvalMode::kAll, ml::default_bounds(s),
                                   {.n = 10, .noise_sigma = 0.0, .seed = 5});
  EXPECT_GE(ev.r_squared, 0.999);
  EXPECT_FALSE(ev.nrmse.has_value());
  EXPECT_EQ(ev.median_curve.size(), s.size());
}

TEST(EvaluateFit, TrainModeExtrapolates) {
  const ml::AreaSeries s = synthetic_series(truth_params(), eight_times());
  const auto ev = ml::evaluate_fit(s, ml::EvalMode::kTrain, ml::default_bounds(s),
                                   {.n = 10, .noise_sigma = 0.0, .seed = 5});
  ASSERT_TRUE(ev.nrmse.has_value());
  EXPECT_LE(*ev.nrmse, 0.01);
  EXPECT_GE(ev.r_squared, 0.999);
}

TEST(EvaluateFit, TooFewPoints) {
  const ml::AreaSeries s = synthetic_series(truth_params(), {0, 10, 20});
  EXPECT_THROW(ml::evaluate_fit(s, ml::EvalMode::kTrain, ml::default_bounds(s), {.n = 2}), ml::InvalidInput);
  const ml::AreaSeries tiny = synthetic_series(truth_params(), {0, 10});
  EXPECT_THROW(ml::evaluate_fit(tiny, ml::EvalMode::kAll, ml::default_bounds(tiny), {.n = 2}), ml::InvalidInput);
}
