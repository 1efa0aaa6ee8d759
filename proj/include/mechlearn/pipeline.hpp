#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mechlearn/components.hpp"
#include "mechlearn/diffusion.hpp"
#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/io.hpp"
#include "mechlearn/maps.hpp"
#include "mechlearn/mechanistic.hpp"
#include "mechlearn/metrics.hpp"
#include "mechlearn/parallel.hpp"
#include "mechlearn/random.hpp"
#include "mechlearn/stats.hpp"

namespace mechlearn {

struct RunConfig {
  int nl = 200;
  double s_ct = 50000.0;
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t n_bootstrap = 100;
  double noise_sigma = 0.10;
  NoiseModel noise_model = NoiseModel::kMultiplicative;
  DecayForm decay_form = DecayForm::kIndependentRate;
  double target_percentile_cap = 90.0;
  MapMode probmap_mode = MapMode::kDynamic;
  double theta = 0.5;
  std::uint64_t seed = 0;
  double dyn_clamp = 1.0;
  std::size_t static_repeats = 20;
  // Express targets as increments over the regressor's reading of the reference.
  bool calibrate_targets = true;
  unsigned workers = 1;
  DenoiserSpec denoiser{};
  RegressorSpec regressor{};

  void validate() const {
    if (steps < 1) throw InvalidInput("steps must be >= 1");
    if (nl < 1 || nl > steps) throw InvalidInput("nl must lie in [1, steps]");
    if (!(s_ct >= 0.0) || !std::isfinite(s_ct)) throw InvalidInput("s_ct must be finite and non-negative");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
      throw InvalidInput("beta range must satisfy 0 < beta_start <= beta_end < 1");
    if (n_bootstrap < 1) throw InvalidInput("n_bootstrap must be >= 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InvalidInput("noise_sigma must be non-negative");
    if (!(target_percentile_cap > 0.0 && target_percentile_cap <= 100.0))
      throw InvalidInput("target_percentile_cap must lie in (0, 100]");
    if (!(theta >= 0.0 && theta <= 1.0)) throw InvalidInput("theta must lie in [0, 1]");
    if (!(dyn_clamp > 0.0)) throw InvalidInput("dyn_clamp must be positive");
    if (static_repeats < 1) throw InvalidInput("static_repeats must be >= 1");
    denoiser.validate();
    regressor.validate();
  }

  NoiseSchedule schedule() const { return make_schedule(steps, beta_start, beta_end); }
};

inline Json to_json(const RunConfig& c) {
  Json den{{"variant", variant_name(c.denoiser)},
           {"s0", c.denoiser.s0},
           {"prior_weight", c.denoiser.prior_weight},
           {"tumor_level", c.denoiser.tumor_level ? Json(*c.denoiser.tumor_level) : Json(nullptr)}};
  Json reg{{"variant", variant_name(c.regressor)}, {"tau", c.regressor.tau}, {"softness", c.regressor.softness}};
  return Json{{"nl", c.nl},
              {"s_ct", c.s_ct},
              {"steps", c.steps},
              {"beta_start", c.beta_start},
              {"beta_end", c.beta_end},
              {"n_bootstrap", c.n_bootstrap},
              {"noise_sigma", c.noise_sigma},
              {"noise_model", to_string(c.noise_model)},
              {"decay_form", to_string(c.decay_form)},
              {"target_percentile_cap", c.target_percentile_cap},
              {"probmap_mode", to_string(c.probmap_mode)},
              {"theta", c.theta},
              {"seed", c.seed},
              {"dyn_clamp", c.dyn_clamp},
              {"static_repeats", c.static_repeats},
              {"calibrate_targets", c.calibrate_targets},
              {"workers", c.workers},
              {"denoiser", std::move(den)},
              {"regressor", std::move(reg)}};
}

/// Fields absent from `j` keep their defaults; unknown fields are rejected.
inline RunConfig run_config_from_json(const Json& j) {
  const std::string w = "run config";
  if (!j.is_object()) throw InvalidInput(w + " must be a JSON object");
  static const std::vector<std::string> known = {
      "nl", "s_ct", "steps", "beta_start", "beta_end", "n_bootstrap", "noise_sigma", "noise_model", "decay_form",
      "target_percentile_cap", "probmap_mode", "theta", "seed", "dyn_clamp", "static_repeats", "calibrate_targets",
      "workers", "denoiser", "regressor"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InvalidInput(w + ": unknown field '" + key + "'");

  RunConfig c;
  detail::read_optional(j, "nl", c.nl, w);
  detail::read_optional(j, "s_ct", c.s_ct, w);
  detail::read_optional(j, "steps", c.steps, w);
  detail::read_optional(j, "beta_start", c.beta_start, w);
  detail::read_optional(j, "beta_end", c.beta_end, w);
  detail::read_optional(j, "n_bootstrap", c.n_bootstrap, w);
  detail::read_optional(j, "noise_sigma", c.noise_sigma, w);
  if (j.contains("noise_model")) c.noise_model = noise_model_from_string(detail::get_field<std::string>(j, "noise_model", w));
  if (j.contains("decay_form")) c.decay_form = decay_form_from_string(detail::get_field<std::string>(j, "decay_form", w));
  detail::read_optional(j, "target_percentile_cap", c.target_percentile_cap, w);
  if (j.contains("probmap_mode")) c.probmap_mode = map_mode_from_string(detail::get_field<std::string>(j, "probmap_mode", w));
  detail::read_optional(j, "theta", c.theta, w);
  detail::read_optional(j, "seed", c.seed, w);
  detail::read_optional(j, "dyn_clamp", c.dyn_clamp, w);
  detail::read_optional(j, "static_repeats", c.static_repeats, w);
  detail::read_optional(j, "calibrate_targets", c.calibrate_targets, w);
  detail::read_optional(j, "workers", c.workers, w);
  if (j.contains("denoiser")) {
    const Json& d = j.at("denoiser");
    DenoiserSpec base;
    detail::read_optional(d, "s0", base.s0, w);
    detail::read_optional(d, "prior_weight", base.prior_weight, w);
    if (d.contains("tumor_level") && !d.at("tumor_level").is_null())
      base.tumor_level = detail::get_field<double>(d, "tumor_level", w);
    c.denoiser = parse_denoiser(d.contains("variant") ? detail::get_field<std::string>(d, "variant", w)
                                                      : variant_name(base),
                                base);
  }
  if (j.contains("regressor")) {
    const Json& r = j.at("regressor");
    RegressorSpec base;
    detail::read_optional(r, "tau", base.tau, w);
    detail::read_optional(r, "softness", base.softness, w);
    c.regressor = parse_regressor(r.contains("variant") ? detail::get_field<std::string>(r, "variant", w)
                                                        : variant_name(base),
                                  base);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Single guided generation
// ---------------------------------------------------------------------------

inline double brain_area_mm2(const BinaryMask& brain, double spacing) {
  return static_cast<double>(brain.count()) * spacing * spacing;
}

inline double mask_fraction(const BinaryMask& tumor, const BinaryMask& brain) {
  if (!tumor.same_shape(brain)) throw InvalidInput("tumor and brain masks differ in shape");
  if (brain.empty()) throw InvalidInput("brain mask is empty");
  return static_cast<double>(tumor.count()) / static_cast<double>(brain.count());
}

/// Everything a generation needs besides its target and seed.
struct ReferenceScan {
  Image2D image;
  BinaryMask brain;
  // Tumor fraction of the reference as segmented; enables target calibration.
  std::optional<double> tumor_fraction;
  // Reference tumor segmentation; unioned into predicted masks when present.
  std::optional<BinaryMask> tumor;

  void validate() const {
    if (!brain.same_shape(image) || brain.empty())
      throw InvalidInput("brain mask must be non-empty and match the reference image");
    if (tumor && !tumor->same_shape(brain)) throw InvalidInput("reference tumor mask shape differs from image");
    if (tumor_fraction && !(*tumor_fraction >= 0.0 && *tumor_fraction < 1.0))
      throw InvalidInput("reference tumor fraction must lie in [0, 1)");
  }
};

/// Guidance target in regressor units. With calibration, the regressor's
/// bias at the reference is removed: target + (R(ref) - fraction(ref)).
inline double guidance_target(double fraction, double reference_reading, std::optional<double> reference_fraction,
                              bool calibrate) {
  double t = fraction;
  if (calibrate && reference_fraction) t += reference_reading - *reference_fraction;
  return std::clamp(t, 0.0, std::nextafter(1.0, 0.0));
}

struct GenerationResult {
  Image2D image;
  double target = 0.0;           // tumor fraction requested
  double guidance_target = 0.0;  // after calibration
  std::uint64_t seed = 0;
};

inline GenerationResult generate_for_target(const ReferenceScan& ref, double target_fraction, int nl, double s_ct,
                                            const RunConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed) {
  if (!(target_fraction >= 0.0 && target_fraction < 1.0)) throw InvalidInput("target fraction must lie in [0, 1)");
  auto denoiser = make_denoiser(cfg.denoiser, sched, ref.image, ref.brain);
  std::unique_ptr<Regressor> regressor;
  GenerationResult out;
  out.target = target_fraction;
  out.guidance_target = target_fraction;
  out.seed = seed;
  if (s_ct != 0.0) {
    regressor = make_regressor(cfg.regressor, sched, ref.brain);
    if (cfg.calibrate_targets && ref.tumor_fraction) {
      const double reading = regressor->evaluate(ref.image, ref.image, 0).value;
      out.guidance_target = guidance_target(target_fraction, reading, ref.tumor_fraction, true);
    }
  }
  const GuidanceConfig g{s_ct, cfg.dyn_clamp, out.guidance_target};
  out.image = generate(ref.image, nl, *denoiser, regressor.get(), g, sched, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Probability-map predictions
// ---------------------------------------------------------------------------

// Independent random streams carved out of the master seed.
inline constexpr std::uint64_t kBootstrapStream = 0;
inline constexpr std::uint64_t kGenerationStream = 1;

struct PredictionResult {
  ProbabilityMap map;
  std::vector<GenerationResult> generations;
  BinaryMask growth_mask;     // thresholded map
  BinaryMask predicted_mask;  // growth_mask plus the reference tumor, if known
  std::vector<std::size_t> replicate_indices;  // dynamic only
  std::optional<BootstrapEnsemble> ensemble;   // dynamic only
};

namespace detail {

inline PredictionResult run_targets(const ReferenceScan& ref, const std::vector<double>& targets,
                                    const std::vector<std::uint64_t>& seeds, MapMode mode, const RunConfig& cfg) {
  const NoiseSchedule sched = cfg.schedule();
  PredictionResult out;
  out.generations.resize(targets.size());
  std::vector<BinaryMask> masks(targets.size());
  parallel_for(targets.size(), cfg.workers, [&](std::size_t i) {
    out.generations[i] = generate_for_target(ref, targets[i], cfg.nl, cfg.s_ct, cfg, sched, seeds[i]);
    masks[i] = binarized_difference(out.generations[i].image, ref.image);
  });
  out.map = aggregate_probability_map(masks, mode);
  out.map.values.set_pixel_spacing(ref.image.pixel_spacing());
  out.growth_mask = threshold_probability_map(out.map, cfg.theta);
  out.predicted_mask = ref.tumor ? mask_union(out.growth_mask, *ref.tumor) : out.growth_mask;
  return out;
}

}  // namespace detail

/// n_repeats generations toward one target with distinct forward-noise seeds.
inline PredictionResult run_static_prediction(const ReferenceScan& ref, double true_target_fraction,
                                              std::size_t n_repeats, const RunConfig& cfg) {
  cfg.validate();
  ref.validate();
  if (n_repeats < 1) throw InvalidInput("static prediction needs n_repeats >= 1");
  const std::uint64_t master = derive_seed(cfg.seed, kGenerationStream);
  std::vector<double> targets(n_repeats, true_target_fraction);
  std::vector<std::uint64_t> seeds(n_repeats);
  for (std::size_t k = 0; k < n_repeats; ++k) seeds[k] = derive_seed(master, k);
  return detail::run_targets(ref, targets, seeds, MapMode::kStatic, cfg);
}

/// Bootstrap the growth model on `series`, predict the tumor fraction at
/// t_future for every converged replicate, keep those at or below the
/// configured percentile, and run one guided generation per kept target.
/// A precomputed ensemble may be supplied instead of refitting.
inline PredictionResult run_dynamic_prediction(const AreaSeries& series, ReferenceScan ref, double t_future,
                                               const RunConfig& cfg,
                                               const std::optional<BootstrapEnsemble>& ensemble = std::nullopt) {
  cfg.validate();
  ref.validate();
  series.validate();
  if (!std::isfinite(t_future)) throw InvalidInput("prediction time must be finite");
  const double brain_mm2 = brain_area_mm2(ref.brain, ref.image.pixel_spacing());
  if (!ref.tumor_fraction) {
    ref.tumor_fraction = ref.tumor ? mask_fraction(*ref.tumor, ref.brain)
                                   : std::min(series.areas.back() / brain_mm2, std::nextafter(1.0, 0.0));
  }

  BootstrapEnsemble ens;
  if (ensemble) {
    ens = *ensemble;
  } else {
    BootstrapOptions bo;
    bo.n = cfg.n_bootstrap;
    bo.noise_sigma = cfg.noise_sigma;
    bo.noise_model = cfg.noise_model;
    bo.seed = derive_seed(cfg.seed, kBootstrapStream);
    bo.workers = cfg.workers;
    bo.fit.decay_form = cfg.decay_form;
    ens = bootstrap_fit(series, default_bounds(series), bo);
  }
  if (ens.converged_count() == 0) {
    double best = std::numeric_limits<double>::infinity();
    for (const FitResult& r : ens.replicates) best = std::min(best, r.residual_sse);
    throw NumericalFailure("no bootstrap replicate converged (" + std::to_string(ens.size()) +
                           " replicates, lowest residual SSE " + std::to_string(best) + " mm^4)");
  }

  std::vector<std::size_t> idx;
  std::vector<double> fractions;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (!ens.replicates[i].converged) continue;
    const double a = tumor_area(t_future, ens.replicates[i].params, ens.decay_form);
    if (!std::isfinite(a)) continue;
    idx.push_back(i);
    fractions.push_back(std::clamp(a / brain_mm2, 0.0, std::nextafter(1.0, 0.0)));
  }
  if (fractions.empty()) throw NumericalFailure("every converged replicate predicts a non-finite area");
  const double cap = percentile(fractions, cfg.target_percentile_cap);

  const std::uint64_t master = derive_seed(cfg.seed, kGenerationStream);
  std::vector<double> targets;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    if (fractions[k] > cap) continue;
    targets.push_back(fractions[k]);
    seeds.push_back(derive_seed(master, idx[k]));
    kept.push_back(idx[k]);
  }
  PredictionResult out = detail::run_targets(ref, targets, seeds, MapMode::kDynamic, cfg);
  out.replicate_indices = std::move(kept);
  out.ensemble = std::move(ens);
  return out;
}

// ---------------------------------------------------------------------------
// Grid search over noise level and guidance scale
// ---------------------------------------------------------------------------

struct LongitudinalPair {
  Image2D ref;
  BinaryMask ref_tumor;
  Image2D next;
  BinaryMask next_tumor;
  BinaryMask brain;
};

struct GridRow {
  int nl = 0;
  double s_ct = 0.0;
  double ssim_tumor = 0.0;    // inside the next-visit tumor mask
  double ssim_outside = 0.0;  // outside its area-doubling dilation
};

/// Each cell generates every pair toward its known next-visit size and
/// averages region SSIM against the next-visit image. Pair k uses the same
/// seed in every cell.
inline std::vector<GridRow> grid_search(const std::vector<LongitudinalPair>& pairs, const std::vector<int>& nl_values,
                                        const std::vector<double>& s_ct_values, const RunConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw InvalidInput("grid search needs at least one longitudinal pair");
  if (nl_values.empty() || s_ct_values.empty()) throw InvalidInput("grid search needs non-empty grids");
  for (int nl : nl_values)
    if (nl < 1 || nl > cfg.steps) throw InvalidInput("grid nl values must lie in [1, steps]");
  for (double s : s_ct_values)
    if (!(s >= 0.0)) throw InvalidInput("grid s_ct values must be non-negative");

  std::vector<ReferenceScan> refs;
  std::vector<double> targets;
  std::vector<BinaryMask> outside;
  for (const LongitudinalPair& p : pairs) {
    if (!p.ref.same_shape(p.next)) throw InvalidInput("pair images differ in shape");
    ReferenceScan r{p.ref, p.brain, mask_fraction(p.ref_tumor, p.brain), p.ref_tumor};
    r.validate();
    refs.push_back(std::move(r));
    targets.push_back(mask_fraction(p.next_tumor, p.brain));
    if (p.next_tumor.empty()) throw InvalidInput("next-visit tumor mask is empty");
    outside.push_back(invert(dilate_to_double_area(p.next_tumor).mask));
  }

  const NoiseSchedule sched = cfg.schedule();
  const std::uint64_t master = derive_seed(cfg.seed, kGenerationStream);
  std::vector<GridRow> rows;
  for (int nl : nl_values)
    for (double s_ct : s_ct_values) {
      std::vector<double> in(pairs.size()), out(pairs.size());
      parallel_for(pairs.size(), cfg.workers, [&](std::size_t k) {
        const Image2D gen = generate_for_target(refs[k], targets[k], nl, s_ct, cfg, sched, derive_seed(master, k)).image;
        in[k] = ssim_region(gen, pairs[k].next, pairs[k].next_tumor);
        out[k] = ssim_region(gen, pairs[k].next, outside[k]);
      });
      GridRow row{nl, s_ct, 0.0, 0.0};
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        row.ssim_tumor += in[k] / static_cast<double>(pairs.size());
        row.ssim_outside += out[k] / static_cast<double>(pairs.size());
      }
      rows.push_back(row);
    }
  return rows;
}

inline std::string format_grid_csv(const std::vector<GridRow>& rows) {
  std::string out = "nl,s_ct,ssim_tumor,ssim_outside\n";
  for (const GridRow& r : rows)
    out += std::to_string(r.nl) + "," + Json(r.s_ct).dump() + "," + Json(r.ssim_tumor).dump() + "," +
           Json(r.ssim_outside).dump() + "\n";
  return out;
}

}  // namespace mechlearn
