// Command-line front end: fitting, prediction, guided generation,
// probability maps, evaluation, grid search and phantom generation.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mechlearn/components.hpp"
#include "mechlearn/diffusion.hpp"
#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/io.hpp"
#include "mechlearn/maps.hpp"
#include "mechlearn/mechanistic.hpp"
#include "mechlearn/metrics.hpp"
#include "mechlearn/phantom.hpp"
#include "mechlearn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mechlearn;

namespace {

void emit(const Json& j, const std::string& out) {
  if (out.empty()) std::cout << j.dump(2) << "\n";
  else write_json(out, j);
}

// Options shared by every command that runs guided generation. Flags left
// unset fall back to --config, then to the built-in defaults.
struct GenerationFlags {
  std::string config;
  int nl = 0;
  double s_ct = 0.0;
  int steps = 0;
  double beta_start = 0.0, beta_end = 0.0, dyn_clamp = 0.0;
  std::string denoiser, regressor;
  double s0 = 0.0, prior_weight = 0.0, tumor_level = 0.0, tau = 0.0, softness = 0.0;
  bool no_calibration = false;
  std::uint64_t seed = 0;
  unsigned workers = 0;
  double theta = 0.0;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app, bool with_theta, bool with_scales = true) {
    app->add_option("--config", config, "run configuration JSON")->check(CLI::ExistingFile);
    if (with_scales) {
      opts.push_back(app->add_option("--nl", nl, "forward noise steps (default 200)"));
      opts.push_back(app->add_option("--s-ct", s_ct, "constant guidance scale (default 50000)"));
    }
    opts.insert(opts.end(), {
        app->add_option("--steps", steps, "diffusion steps L (default 1000)"),
        app->add_option("--beta-start", beta_start, "first beta (default 1e-4)"),
        app->add_option("--beta-end", beta_end, "last beta (default 0.02)"),
        app->add_option("--dyn-clamp", dyn_clamp, "bound on the dynamic scale (default 1)"),
        app->add_option("--denoiser", denoiser,
                        "analytic-mixture|analytic-gaussian|analytic-delta|plugin:CMD (default analytic-mixture)"),
        app->add_option("--regressor", regressor, "soft-area|plugin:CMD (default soft-area)"),
        app->add_option("--s0", s0, "prior intensity std of the analytic denoisers"),
        app->add_option("--prior-weight", prior_weight, "mixture prior tumor probability"),
        app->add_option("--tumor-level", tumor_level, "mixture tumor intensity (default: estimated)"),
        app->add_option("--tau", tau, "soft-area intensity threshold (default 0.6)"),
        app->add_option("--softness", softness, "soft-area logistic width (default 0.02)"),
        app->add_option("--seed", seed, "master seed"),
        app->add_option("--workers", workers, "parallel generations (0 = all cores)"),
    });
    if (with_theta) opts.push_back(app->add_option("--theta", theta, "probability threshold (default 0.5)"));
    app->add_flag("--no-calibration", no_calibration, "use targets as absolute regressor values");
  }

  bool given(const char* name) const {
    for (CLI::Option* o : opts)
      if (o->check_lname(std::string(name).substr(2)) && o->count() > 0) return true;
    return false;
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : run_config_from_json(read_json(config));
    if (given("--nl")) c.nl = nl;
    if (given("--s-ct")) c.s_ct = s_ct;
    if (given("--steps")) c.steps = steps;
    if (given("--beta-start")) c.beta_start = beta_start;
    if (given("--beta-end")) c.beta_end = beta_end;
    if (given("--dyn-clamp")) c.dyn_clamp = dyn_clamp;
    if (given("--s0")) c.denoiser.s0 = s0;
    if (given("--prior-weight")) c.denoiser.prior_weight = prior_weight;
    if (given("--tumor-level")) c.denoiser.tumor_level = tumor_level;
    if (given("--denoiser")) c.denoiser = parse_denoiser(denoiser, c.denoiser);
    if (given("--tau")) c.regressor.tau = tau;
    if (given("--softness")) c.regressor.softness = softness;
    if (given("--regressor")) c.regressor = parse_regressor(regressor, c.regressor);
    if (given("--seed")) c.seed = seed;
    if (given("--workers")) c.workers = workers;
    if (given("--theta")) c.theta = theta;
    if (no_calibration) c.calibrate_targets = false;
    c.validate();
    return c;
  }
};

ReferenceScan load_reference(const std::string& image, const std::string& brain, const std::string& tumor) {
  ReferenceScan ref;
  ref.image = read_image(image);
  ref.brain = read_mask(brain);
  if (!tumor.empty()) {
    ref.tumor = read_mask(tumor);
    ref.tumor_fraction = mask_fraction(*ref.tumor, ref.brain);
  }
  ref.validate();
  return ref;
}

Json prediction_summary(const PredictionResult& r) {
  Json gens = Json::array();
  for (const GenerationResult& g : r.generations)
    gens.push_back({{"target", g.target}, {"guidance_target", g.guidance_target}, {"seed", g.seed}});
  Json j{{"mode", to_string(r.map.mode)},
         {"n_aggregated", r.map.n_aggregated},
         {"growth_pixels", r.growth_mask.count()},
         {"predicted_pixels", r.predicted_mask.count()},
         {"generations", std::move(gens)}};
  if (!r.replicate_indices.empty()) j["replicate_indices"] = r.replicate_indices;
  return j;
}

std::vector<LongitudinalPair> pairs_from_manifest(const fs::path& manifest) {
  const Json m = read_json(manifest);
  const fs::path dir = manifest.parent_path();
  const BinaryMask brain = read_mask(dir / detail::get_field<std::string>(m, "brain_mask", "manifest"));
  const Json frames = detail::get_field<Json>(m, "frames", "manifest");
  if (!frames.is_array() || frames.size() < 2) throw InvalidInput("manifest needs at least two frames");
  std::vector<LongitudinalPair> pairs;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    LongitudinalPair p;
    p.ref = read_image(dir / detail::get_field<std::string>(frames[k], "image", "manifest frame"));
    p.ref_tumor = read_mask(dir / detail::get_field<std::string>(frames[k], "mask", "manifest frame"));
    p.next = read_image(dir / detail::get_field<std::string>(frames[k + 1], "image", "manifest frame"));
    p.next_tumor = read_mask(dir / detail::get_field<std::string>(frames[k + 1], "mask", "manifest frame"));
    p.brain = brain;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<LongitudinalPair> pairs_from_json(const fs::path& path) {
  const Json j = read_json(path);
  if (!j.is_array() || j.empty()) throw InvalidInput("pairs file must be a non-empty JSON array");
  const fs::path dir = path.parent_path();
  std::vector<LongitudinalPair> pairs;
  for (const Json& e : j) {
    auto file = [&](const char* key) { return dir / detail::get_field<std::string>(e, key, "pair"); };
    pairs.push_back({read_image(file("ref")), read_mask(file("ref_mask")), read_image(file("next")),
                     read_mask(file("next_mask")), read_mask(file("brain"))});
  }
  return pairs;
}

std::vector<double> read_column_pairs(const fs::path& csv, std::vector<double>& y) {
  const std::string text = read_text(csv);
  std::istringstream in(text);
  std::string line;
  std::vector<double> x;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (!header) {
      if (line != "x,y") throw InvalidInput("paired CSV header must be 'x,y'");
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InvalidInput("paired CSV line " + std::to_string(lineno) + " needs two columns");
    const std::string where = "paired CSV line " + std::to_string(lineno);
    x.push_back(detail::parse_double(std::string_view(line).substr(0, comma), where));
    y.push_back(detail::parse_double(std::string_view(line).substr(comma + 1), where));
  }
  return x;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mechanistic tumor growth model with regressor-guided diffusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mechlearn 1.0.0");

  // fit
  auto* fit = app.add_subcommand("fit", "fit the growth model and bootstrap an ensemble");
  std::string f_series, f_meta, f_out, f_noise_model = "multiplicative", f_form = "independent-rate";
  std::size_t f_boot = 100;
  double f_noise = 0.10;
  std::uint64_t f_seed = 0;
  unsigned f_workers = 1;
  fit->add_option("--series", f_series, "CSV t_days,area_mm2")->required()->check(CLI::ExistingFile);
  fit->add_option("--meta", f_meta, "JSON sidecar")->required()->check(CLI::ExistingFile);
  fit->add_option("--bootstrap", f_boot, "bootstrap replicates")->capture_default_str();
  fit->add_option("--noise", f_noise, "bootstrap noise sigma")->capture_default_str();
  fit->add_option("--noise-model", f_noise_model, "multiplicative|additive")->capture_default_str();
  fit->add_option("--decay-form", f_form, "independent-rate|growth-coupled")->capture_default_str();
  fit->add_option("--seed", f_seed, "bootstrap seed")->capture_default_str();
  fit->add_option("--workers", f_workers, "parallel fits (0 = all cores)")->capture_default_str();
  fit->add_option("--out", f_out, "output JSON")->required();

  // predict
  auto* predict = app.add_subcommand("predict", "ensemble quantiles of the tumor area at a time");
  std::string p_fit, p_out;
  double p_time = 0.0;
  std::vector<double> p_q = {2.5, 50, 90, 97.5};
  predict->add_option("--fit", p_fit, "fit JSON")->required()->check(CLI::ExistingFile);
  predict->add_option("--time", p_time, "days")->required();
  predict->add_option("--quantiles", p_q, "percentiles")->delimiter(',')->capture_default_str();
  predict->add_option("--out", p_out, "output JSON (default stdout)");

  // generate
  auto* gen = app.add_subcommand("generate", "one guided generation toward a tumor fraction");
  std::string g_image, g_mask, g_tumor, g_out;
  double g_target = 0.0;
  GenerationFlags g_flags;
  gen->add_option("--image", g_image, "reference image")->required()->check(CLI::ExistingFile);
  gen->add_option("--mask", g_mask, "brain mask")->required()->check(CLI::ExistingFile);
  gen->add_option("--tumor-mask", g_tumor, "reference tumor mask (enables target calibration)")
      ->check(CLI::ExistingFile);
  gen->add_option("--target", g_target, "tumor fraction of brain area")->required();
  gen->add_option("--out", g_out, "output image")->required();
  g_flags.add(gen, false);

  // probmap
  auto* prob = app.add_subcommand("probmap", "tumor growth probability map");
  std::string m_mode = "dynamic", m_image, m_mask, m_tumor, m_series, m_meta, m_fit, m_out, m_out_mask, m_summary;
  double m_target = -1.0, m_time = 0.0;
  std::size_t m_repeats = 0;
  GenerationFlags m_flags;
  prob->add_option("--mode", m_mode, "static|dynamic")->capture_default_str();
  prob->add_option("--image", m_image, "reference image")->required()->check(CLI::ExistingFile);
  prob->add_option("--mask", m_mask, "brain mask")->required()->check(CLI::ExistingFile);
  prob->add_option("--tumor-mask", m_tumor, "reference tumor mask")->check(CLI::ExistingFile);
  prob->add_option("--target", m_target, "static: tumor fraction");
  prob->add_option("--repeats", m_repeats, "static: generations (default 20)");
  prob->add_option("--series", m_series, "dynamic: CSV t_days,area_mm2")->check(CLI::ExistingFile);
  prob->add_option("--meta", m_meta, "dynamic: series sidecar")->check(CLI::ExistingFile);
  prob->add_option("--fit", m_fit, "dynamic: reuse a fit JSON")->check(CLI::ExistingFile);
  prob->add_option("--time", m_time, "dynamic: prediction time, days");
  prob->add_option("--out", m_out, "probability map image")->required();
  prob->add_option("--out-mask", m_out_mask, "predicted mask image");
  prob->add_option("--summary", m_summary, "summary JSON (default stdout)");
  m_flags.add(prob, true);

  // eval
  auto* eval = app.add_subcommand("eval", "image and mask metrics");
  eval->require_subcommand(1);
  auto* e_ssim = eval->add_subcommand("ssim", "SSIM inside a region (whole image by default)");
  std::string s_a, s_b, s_region, s_out;
  bool s_invert = false;
  e_ssim->add_option("--a", s_a, "image")->required()->check(CLI::ExistingFile);
  e_ssim->add_option("--b", s_b, "image")->required()->check(CLI::ExistingFile);
  e_ssim->add_option("--region", s_region, "region mask")->check(CLI::ExistingFile);
  e_ssim->add_flag("--outside", s_invert, "use the region outside the area-doubling dilation of --region");
  e_ssim->add_option("--out", s_out, "output JSON (default stdout)");
  auto* e_hd = eval->add_subcommand("hd95", "95th percentile Hausdorff distance between masks");
  std::string h_a, h_b, h_out;
  e_hd->add_option("--a", h_a, "mask")->required()->check(CLI::ExistingFile);
  e_hd->add_option("--b", h_b, "mask")->required()->check(CLI::ExistingFile);
  e_hd->add_option("--out", h_out, "output JSON (default stdout)");
  auto* e_wx = eval->add_subcommand("wilcoxon", "paired Wilcoxon signed-rank test");
  std::string w_csv, w_out;
  std::vector<double> w_x, w_y;
  e_wx->add_option("--pairs", w_csv, "CSV with header x,y")->check(CLI::ExistingFile);
  e_wx->add_option("--x", w_x, "first sample")->delimiter(',');
  e_wx->add_option("--y", w_y, "second sample")->delimiter(',');
  e_wx->add_option("--out", w_out, "output JSON (default stdout)");

  // gridsearch
  auto* grid = app.add_subcommand("gridsearch", "region SSIM over noise level and guidance scale");
  std::vector<int> gs_nl = {100, 200, 500};
  std::vector<double> gs_sct = {50000, 100000, 500000};
  std::string gs_manifest, gs_pairs, gs_out;
  GenerationFlags gs_flags;
  grid->add_option("--nl", gs_nl, "noise levels")->delimiter(',')->capture_default_str();
  grid->add_option("--s-ct", gs_sct, "guidance scales")->delimiter(',')->capture_default_str();
  grid->add_option("--manifest", gs_manifest, "phantom manifest; consecutive frames form pairs")
      ->check(CLI::ExistingFile);
  grid->add_option("--pairs", gs_pairs, "JSON list of {ref, ref_mask, next, next_mask, brain}")
      ->check(CLI::ExistingFile);
  grid->add_option("--out", gs_out, "output CSV (default stdout)");
  gs_flags.add(grid, false, false);

  // phantom
  auto* ph = app.add_subcommand("phantom", "synthetic longitudinal series with ground truth");
  std::string ph_spec, ph_out;
  std::uint64_t ph_seed = 0;
  ph->add_option("--spec", ph_spec, "phantom spec JSON")->required()->check(CLI::ExistingFile);
  ph->add_option("--out", ph_out, "output directory")->required();
  ph->add_option("--seed", ph_seed, "noise seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kInvalidInput);
  }

  try {
    if (*fit) {
      FitDocument doc;
      doc.series = read_series(f_series, f_meta);
      BootstrapOptions bo;
      bo.n = f_boot;
      bo.noise_sigma = f_noise;
      bo.noise_model = noise_model_from_string(f_noise_model);
      bo.seed = f_seed;
      bo.workers = f_workers;
      bo.fit.decay_form = decay_form_from_string(f_form);
      const ParamBounds bounds = default_bounds(doc.series);
      doc.fit = fit_params(doc.series, bounds, std::nullopt, bo.fit);
      doc.ensemble = bootstrap_fit(doc.series, bounds, bo);
      write_json(f_out, to_json(doc));
      std::cout << "fit: R^2 " << doc.fit.r_squared << ", " << doc.ensemble.converged_count() << "/"
                << doc.ensemble.size() << " replicates converged\n";
    } else if (*predict) {
      const FitDocument doc = fit_document_from_json(read_json(p_fit));
      const std::vector<double> vals = predict_quantiles(doc.ensemble, p_time, p_q);
      Json qs = Json::array();
      for (std::size_t i = 0; i < p_q.size(); ++i) qs.push_back({{"q", p_q[i]}, {"area_mm2", vals[i]}});
      emit(Json{{"time_days", p_time}, {"point_fit_mm2", tumor_area(p_time, doc.fit.params, doc.ensemble.decay_form)},
                {"quantiles", std::move(qs)}},
           p_out);
    } else if (*gen) {
      const RunConfig cfg = g_flags.resolve();
      const ReferenceScan ref = load_reference(g_image, g_mask, g_tumor);
      const GenerationResult r =
          generate_for_target(ref, g_target, cfg.nl, cfg.s_ct, cfg, cfg.schedule(), cfg.seed);
      write_image(g_out, r.image);
    } else if (*prob) {
      RunConfig cfg = m_flags.resolve();
      ReferenceScan ref = load_reference(m_image, m_mask, m_tumor);
      const MapMode mode = map_mode_from_string(m_mode);
      PredictionResult r;
      if (mode == MapMode::kStatic) {
        if (m_target < 0.0) throw InvalidInput("static maps need --target");
        r = run_static_prediction(ref, m_target, m_repeats ? m_repeats : cfg.static_repeats, cfg);
      } else {
        if (prob->count("--time") == 0) throw InvalidInput("dynamic maps need --time");
        std::optional<BootstrapEnsemble> ens;
        AreaSeries series;
        if (!m_fit.empty()) {
          FitDocument doc = fit_document_from_json(read_json(m_fit));
          series = doc.series;
          ens = std::move(doc.ensemble);
        } else {
          if (m_series.empty() || m_meta.empty()) throw InvalidInput("dynamic maps need --fit or --series and --meta");
          series = read_series(m_series, m_meta);
        }
        r = run_dynamic_prediction(series, ref, m_time, cfg, ens);
      }
      write_image(m_out, r.map.values);
      if (!m_out_mask.empty()) write_mask(m_out_mask, r.predicted_mask, ref.image.pixel_spacing());
      emit(prediction_summary(r), m_summary);
    } else if (*e_ssim) {
      const Image2D a = read_image(s_a), b = read_image(s_b);
      if (!a.same_shape(b)) throw InvalidInput("ssim: image shapes differ");
      BinaryMask region(a.width(), a.height(), true);
      if (!s_region.empty()) region = read_mask(s_region);
      if (s_invert) region = invert(dilate_to_double_area(region).mask);
      emit(Json{{"ssim", ssim_region(a, b, region)}, {"region_pixels", region.count()}}, s_out);
    } else if (*e_hd) {
      const Image2D a = read_image(h_a);
      emit(Json{{"hd95_mm", hd95(image_to_mask(a), read_mask(h_b), a.pixel_spacing())}}, h_out);
    } else if (*e_wx) {
      std::vector<double> x = w_x, y = w_y;
      if (!w_csv.empty()) {
        if (!x.empty() || !y.empty()) throw InvalidInput("give either --pairs or --x/--y");
        x = read_column_pairs(w_csv, y);
      }
      const WilcoxonResult w = wilcoxon_signed_rank(x, y);
      emit(Json{{"statistic", w.statistic},
                {"w_plus", w.w_plus},
                {"w_minus", w.w_minus},
                {"n", w.n},
                {"p_two_sided", w.p_two_sided},
                {"exact", w.exact}},
           w_out);
    } else if (*grid) {
      RunConfig cfg = gs_flags.resolve();
      if (gs_manifest.empty() == gs_pairs.empty()) throw InvalidInput("give exactly one of --manifest or --pairs");
      const auto pairs = gs_manifest.empty() ? pairs_from_json(gs_pairs) : pairs_from_manifest(gs_manifest);
      const std::string csv = format_grid_csv(grid_search(pairs, gs_nl, gs_sct, cfg));
      if (gs_out.empty()) std::cout << csv;
      else write_text(gs_out, csv);
    } else if (*ph) {
      const PhantomSpec spec = phantom_spec_from_json(read_json(ph_spec));
      const auto frames = generate_phantom_series(spec, ph_seed);
      const fs::path dir = ph_out;
      fs::create_directories(dir);
      const BinaryMask brain = brain_mask(spec);
      write_mask(dir / "brain.img", brain, spec.pixel_spacing);
      AreaSeries series;
      series.t_rt_start = spec.growth.t_rt_start;
      series.brain_area = brain_area_mm2(brain, spec.pixel_spacing);
      Json list = Json::array();
      for (std::size_t k = 0; k < frames.size(); ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "frame_%03zu", k);
        const std::string img = std::string(stem) + ".img", msk = std::string(stem) + "_mask.img";
        write_image(dir / img, frames[k].image);
        write_mask(dir / msk, frames[k].tumor, spec.pixel_spacing);
        series.times.push_back(frames[k].t);
        series.areas.push_back(frames[k].mask_area_mm2);
        list.push_back({{"t_days", frames[k].t},
                        {"image", img},
                        {"mask", msk},
                        {"area_mm2", frames[k].area_mm2},
                        {"mask_area_mm2", frames[k].mask_area_mm2}});
      }
      write_series(dir / "series.csv", dir / "series.json", series);
      write_json(dir / "manifest.json", Json{{"seed", ph_seed},
                                             {"pixel_spacing_mm", spec.pixel_spacing},
                                             {"brain_mask", "brain.img"},
                                             {"brain_area_mm2", series.brain_area},
                                             {"series_csv", "series.csv"},
                                             {"series_meta", "series.json"},
                                             {"spec", to_json(spec)},
                                             {"frames", std::move(list)}});
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
