#include <gtest/gtest.h>

#include "mechlearn/phantom.hpp"
#include "mechlearn/pipeline.hpp"

namespace ml = mechlearn;

namespace {

struct Scene {
  ml::PhantomSpec spec;
  std::vector<ml::PhantomFrame> frames;
  ml::BinaryMask brain;
};

Scene make_scene() {
  Scene s;
  s.spec.growth = {120, 0.012, 0.8, 0.05, 10, 0.2, 40};
  s.spec.observation_times = {0, 20, 40, 60, 80, 100};
  s.frames = ml::generate_phantom_series(s.spec, 3);
  s.brain = ml::brain_mask(s.spec);
  return s;
}

ml::RunConfig fast_config() {
  ml::RunConfig c;
  c.n_bootstrap = 12;
  c.static_repeats = 3;
  return c;
}

}  // namespace

TEST(RunConfig, Defaults) {
  const ml::RunConfig c;
  EXPECT_EQ(c.nl, 200);
  EXPECT_EQ(c.s_ct, 50000.0);
  EXPECT_EQ(c.steps, 1000);
  EXPECT_EQ(c.n_bootstrap, 100u);
  EXPECT_EQ(c.noise_sigma, 0.10);
  EXPECT_EQ(c.target_percentile_cap, 90.0);
  EXPECT_EQ(c.theta, 0.5);
  EXPECT_EQ(c.probmap_mode, ml::MapMode::kDynamic);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, JsonRoundTrip) {
  ml::RunConfig c;
  c.nl = 150;
  c.seed = 77;
  c.denoiser = ml::parse_denoiser("analytic-gaussian");
  c.denoiser.tumor_level = 0.9;
  c.regressor.tau = 0.55;
  const auto back = ml::run_config_from_json(ml::to_json(c));
  EXPECT_EQ(ml::to_json(back).dump(), ml::to_json(c).dump());
  EXPECT_EQ(ml::run_config_from_json(ml::Json::object()).nl, 200);
}

TEST(RunConfig, Validation) {
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"bogus", 1}}), ml::InvalidInput);
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"nl", 0}}), ml::InvalidInput);
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"nl", 2000}}), ml::InvalidInput);
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"s_ct", -1}}), ml::InvalidInput);
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"theta", 2}}), ml::InvalidInput);
  EXPECT_THROW(ml::run_config_from_json(ml::Json{{"denoiser", {{"variant", "nope"}}}}), ml::InvalidInput);
  EXPECT_THROW(ml::parse_denoiser("plugin:"), ml::InvalidInput);
}

TEST(Calibration, GuidanceTarget) {
  EXPECT_NEAR(ml::guidance_target(0.10, 0.13, 0.08, true), 0.15, 1e-15);
  EXPECT_EQ(ml::guidance_target(0.10, 0.13, 0.08, false), 0.10);
  EXPECT_EQ(ml::guidance_target(0.10, 0.13, std::nullopt, true), 0.10);
  EXPECT_EQ(ml::guidance_target(0.10, 0.0, 0.5, true), 0.0);
  EXPECT_LT(ml::guidance_target(0.9, 0.9, 0.1, true), 1.0);
}

TEST(TumorLevel, BrightClassMean) {
  ml::Image2D img(10, 10, 1.0, 0.3);
  ml::BinaryMask brain(10, 10, true);
  for (int x = 0; x < 3; ++x) img(x, 0) = 0.9;
  EXPECT_NEAR(ml::estimate_tumor_level(img, brain), 0.9, 1e-12);
  EXPECT_EQ(ml::estimate_tumor_level(ml::Image2D(10, 10, 1.0, 0.4), brain), 0.4);
}

TEST(Static, SingleRepeatGivesBinaryMap) {
  const Scene s = make_scene();
  const ml::ReferenceScan ref{s.frames[3].image, s.brain, ml::mask_fraction(s.frames[3].tumor, s.brain),
                              s.frames[3].tumor};
  auto cfg = fast_config();
  const auto r = ml::run_static_prediction(ref, ml::mask_fraction(s.frames[4].tumor, s.brain), 1, cfg);
  EXPECT_EQ(r.map.n_aggregated, 1u);
  EXPECT_EQ(r.map.mode, ml::MapMode::kStatic);
  for (double v : r.map.values.pixels()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_EQ(r.growth_mask, ml::binarized_difference(r.generations[0].image, ref.image));
  EXPECT_TRUE(r.predicted_mask.contains(s.frames[3].tumor));
  EXPECT_TRUE(r.predicted_mask.contains(r.growth_mask));
}

TEST(Static, DeterministicAcrossWorkers) {
  const Scene s = make_scene();
  const ml::ReferenceScan ref{s.frames[3].image, s.brain, ml::mask_fraction(s.frames[3].tumor, s.brain),
                              s.frames[3].tumor};
  auto cfg = fast_config();
  const double target = ml::mask_fraction(s.frames[4].tumor, s.brain);
  const auto a = ml::run_static_prediction(ref, target, 3, cfg);
  cfg.workers = 3;
  const auto b = ml::run_static_prediction(ref, target, 3, cfg);
  EXPECT_EQ(a.map.values, b.map.values);
  EXPECT_NE(a.generations[0].image, a.generations[1].image);
}

TEST(Dynamic, DegenerateEnsembleMatchesStatic) {
  // Identical replicates give identical targets; only the seeds differ.
  const Scene s = make_scene();
  ml::AreaSeries series;
  for (int k = 0; k < 5; ++k) {
    series.times.push_back(s.frames[k].t);
    series.areas.push_back(s.frames[k].mask_area_mm2);
  }
  series.t_rt_start = 40;
  series.brain_area = ml::brain_area_mm2(s.brain, 1.0);
  ml::BootstrapEnsemble ens;
  ml::FitResult fr{s.spec.growth, 0.0, 1.0, true, 1};
  ens.replicates.assign(4, fr);
  const ml::ReferenceScan ref{s.frames[4].image, s.brain, std::nullopt, s.frames[4].tumor};
  auto cfg = fast_config();
  const auto r = ml::run_dynamic_prediction(series, ref, 100, cfg, ens);
  ASSERT_EQ(r.generations.size(), 4u);
  const double expect = ml::tumor_area(100, s.spec.growth) / series.brain_area;
  for (const auto& g : r.generations) EXPECT_NEAR(g.target, expect, 1e-15);
  EXPECT_EQ(r.replicate_indices, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(r.map.mode, ml::MapMode::kDynamic);
}

TEST(Dynamic, CapDropsLargestTargets) {
  const Scene s = make_scene();
  ml::AreaSeries series;
  series.times = {0, 20, 40, 60, 80};
  for (double t : series.times) series.areas.push_back(ml::tumor_area(t, s.spec.growth));
  series.t_rt_start = 40;
  series.brain_area = ml::brain_area_mm2(s.brain, 1.0);
  ml::BootstrapEnsemble ens;
  for (int k = 0; k < 10; ++k) {
    ml::GrowthParams p = s.spec.growth;
    p.survival = 0.5 + 0.05 * k;  // strictly increasing predictions
    ens.replicates.push_back({p, 0.0, 1.0, true, 1});
  }
  ens.replicates[2].converged = false;
  auto cfg = fast_config();
  cfg.nl = 20;
  const ml::ReferenceScan ref{s.frames[4].image, s.brain, std::nullopt, s.frames[4].tumor};
  const auto r = ml::run_dynamic_prediction(series, ref, 100, cfg, ens);
  // Nine converged targets; the 90th percentile lies between the two largest.
  EXPECT_EQ(r.replicate_indices, (std::vector<std::size_t>{0, 1, 3, 4, 5, 6, 7, 8}));
}

TEST(Dynamic, NoConvergedReplicateIsNumericalFailure) {
  const Scene s = make_scene();
  ml::AreaSeries series;
  series.times = {0, 20, 40, 60, 80};
  series.areas = {100, 110, 120, 115, 110};
  series.t_rt_start = 40;
  series.brain_area = ml::brain_area_mm2(s.brain, 1.0);
  ml::BootstrapEnsemble ens;
  ens.replicates.assign(3, ml::FitResult{s.spec.growth, 5.0, 0.0, false, 200});
  const ml::ReferenceScan ref{s.frames[4].image, s.brain, std::nullopt, std::nullopt};
  EXPECT_THROW(ml::run_dynamic_prediction(series, ref, 100, fast_config(), ens), ml::NumericalFailure);
}

TEST(Grid, CsvAndShape) {
  const Scene s = make_scene();
  std::vector<ml::LongitudinalPair> pairs{
      {s.frames[3].image, s.frames[3].tumor, s.frames[4].image, s.frames[4].tumor, s.brain}};
  auto cfg = fast_config();
  const auto rows = ml::grid_search(pairs, {10, 20}, {0.0, 1000.0}, cfg);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1].nl, 10);
  EXPECT_EQ(rows[1].s_ct, 1000.0);
  for (const auto& r : rows) {
    EXPECT_GT(r.ssim_tumor, -1.0);
    EXPECT_LE(r.ssim_outside, 1.0);
  }
  const std::string csv = ml::format_grid_csv({{10, 0.0, 0.5, 0.25}});
  EXPECT_EQ(csv, "nl,s_ct,ssim_tumor,ssim_outside\n10,0.0,0.5,0.25\n");
  EXPECT_THROW(ml::grid_search({}, {10}, {0.0}, cfg), ml::InvalidInput);
  EXPECT_THROW(ml::grid_search(pairs, {0}, {0.0}, cfg), ml::InvalidInput);
}
