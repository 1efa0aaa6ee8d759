#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mechlearn/error.hpp"
#include "mechlearn/mechanistic.hpp"
#include "mechlearn/phantom.hpp"

namespace mechlearn {

using Json = nlohmann::ordered_json;

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("failed writing " + path.string());
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw InvalidInput(what + ": " + e.what());
  }
}

inline Json read_json(const std::filesystem::path& path) { return parse_json(read_text(path), path.string()); }

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

namespace detail {

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty())
    throw InvalidInput(where + ": '" + std::string(s) + "' is not a number");
  return v;
}

template <class T>
T get_field(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw InvalidInput(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw InvalidInput(where + ": field '" + key + "': " + e.what());
  }
}

template <class T>
void read_optional(const Json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = get_field<T>(j, key, where);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Area series: CSV `t_days,area_mm2` plus JSON sidecar
// ---------------------------------------------------------------------------

inline AreaSeries parse_series(const std::string& csv, const Json& meta) {
  AreaSeries s;
  std::istringstream in(csv);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (!header) {
      if (line != "t_days,area_mm2") throw InvalidInput("series CSV header must be 't_days,area_mm2'");
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw InvalidInput("series CSV line " + std::to_string(lineno) + " must have two columns");
    const std::string where = "series CSV line " + std::to_string(lineno);
    s.times.push_back(detail::parse_double(std::string_view(line).substr(0, comma), where));
    s.areas.push_back(detail::parse_double(std::string_view(line).substr(comma + 1), where));
  }
  if (!header) throw InvalidInput("series CSV is empty");
  s.t_rt_start = detail::get_field<double>(meta, "t_rt_start_days", "series metadata");
  s.brain_area = detail::get_field<double>(meta, "brain_area_mm2", "series metadata");
  s.validate();
  return s;
}

inline AreaSeries read_series(const std::filesystem::path& csv, const std::filesystem::path& meta) {
  return parse_series(read_text(csv), read_json(meta));
}

inline std::string format_series_csv(const AreaSeries& s) {
  std::string out = "t_days,area_mm2\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += Json(s.times[i]).dump() + "," + Json(s.areas[i]).dump() + "\n";
  }
  return out;
}

inline Json series_meta_json(const AreaSeries& s) {
  return Json{{"t_rt_start_days", s.t_rt_start}, {"brain_area_mm2", s.brain_area}};
}

inline void write_series(const std::filesystem::path& csv, const std::filesystem::path& meta, const AreaSeries& s) {
  write_text(csv, format_series_csv(s));
  write_json(meta, series_meta_json(s));
}

// ---------------------------------------------------------------------------
// Fit results and ensembles
// ---------------------------------------------------------------------------

inline Json to_json(const GrowthParams& p) {
  return Json{{"a0", p.a0},           {"lambda", p.lambda}, {"survival", p.survival},
              {"lambda_decay", p.lambda_decay}, {"delay", p.delay},   {"slope", p.slope},
              {"t_rt_start", p.t_rt_start}};
}

inline GrowthParams growth_params_from_json(const Json& j) {
  const std::string w = "growth parameters";
  GrowthParams p;
  p.a0 = detail::get_field<double>(j, "a0", w);
  p.lambda = detail::get_field<double>(j, "lambda", w);
  p.survival = detail::get_field<double>(j, "survival", w);
  p.lambda_decay = detail::get_field<double>(j, "lambda_decay", w);
  p.delay = detail::get_field<double>(j, "delay", w);
  p.slope = detail::get_field<double>(j, "slope", w);
  p.t_rt_start = detail::get_field<double>(j, "t_rt_start", w);
  p.validate();
  return p;
}

inline Json to_json(const FitResult& r) {
  return Json{{"params", to_json(r.params)},
              {"residual_sse", r.residual_sse},
              {"r_squared", r.r_squared},
              {"converged", r.converged},
              {"n_iterations", r.n_iterations}};
}

inline FitResult fit_result_from_json(const Json& j) {
  const std::string w = "fit result";
  FitResult r;
  r.params = growth_params_from_json(detail::get_field<Json>(j, "params", w));
  r.residual_sse = detail::get_field<double>(j, "residual_sse", w);
  r.r_squared = detail::get_field<double>(j, "r_squared", w);
  r.converged = detail::get_field<bool>(j, "converged", w);
  r.n_iterations = detail::get_field<int>(j, "n_iterations", w);
  return r;
}

inline Json to_json(const BootstrapEnsemble& e) {
  Json reps = Json::array();
  for (const FitResult& r : e.replicates) reps.push_back(to_json(r));
  return Json{{"noise_sigma", e.noise_sigma},
              {"noise_model", to_string(e.noise_model)},
              {"seed", e.seed},
              {"decay_form", to_string(e.decay_form)},
              {"replicates", std::move(reps)}};
}

inline BootstrapEnsemble ensemble_from_json(const Json& j) {
  const std::string w = "bootstrap ensemble";
  BootstrapEnsemble e;
  e.noise_sigma = detail::get_field<double>(j, "noise_sigma", w);
  e.noise_model = noise_model_from_string(detail::get_field<std::string>(j, "noise_model", w));
  e.seed = detail::get_field<std::uint64_t>(j, "seed", w);
  e.decay_form = decay_form_from_string(detail::get_field<std::string>(j, "decay_form", w));
  const Json reps = detail::get_field<Json>(j, "replicates", w);
  if (!reps.is_array() || reps.empty()) throw InvalidInput(w + ": replicates must be a non-empty array");
  for (const Json& r : reps) e.replicates.push_back(fit_result_from_json(r));
  return e;
}

/// Document written by `fit`: the point fit to the observed series plus the
/// bootstrap ensemble.
struct FitDocument {
  AreaSeries series;
  FitResult fit;
  BootstrapEnsemble ensemble;
};

inline Json to_json(const FitDocument& d) {
  return Json{{"series", {{"t_days", d.series.times},
                          {"area_mm2", d.series.areas},
                          {"t_rt_start_days", d.series.t_rt_start},
                          {"brain_area_mm2", d.series.brain_area}}},
              {"fit", to_json(d.fit)},
              {"bootstrap", to_json(d.ensemble)}};
}

inline FitDocument fit_document_from_json(const Json& j) {
  const std::string w = "fit document";
  FitDocument d;
  const Json s = detail::get_field<Json>(j, "series", w);
  d.series.times = detail::get_field<std::vector<double>>(s, "t_days", w);
  d.series.areas = detail::get_field<std::vector<double>>(s, "area_mm2", w);
  d.series.t_rt_start = detail::get_field<double>(s, "t_rt_start_days", w);
  d.series.brain_area = detail::get_field<double>(s, "brain_area_mm2", w);
  d.series.validate();
  d.fit = fit_result_from_json(detail::get_field<Json>(j, "fit", w));
  d.ensemble = ensemble_from_json(detail::get_field<Json>(j, "bootstrap", w));
  return d;
}

// ---------------------------------------------------------------------------
// Phantom specification
// ---------------------------------------------------------------------------

inline Json to_json(const PhantomSpec& s) {
  Json growth = to_json(s.growth);
  return Json{{"width", s.width},
              {"height", s.height},
              {"pixel_spacing_mm", s.pixel_spacing},
              {"brain", {{"cx", s.brain.cx}, {"cy", s.brain.cy}, {"semi_x", s.brain.semi_x}, {"semi_y", s.brain.semi_y}}},
              {"texture_seed", s.texture_seed},
              {"tumor",
               {{"cx", s.tumor.cx},
                {"cy", s.tumor.cy},
                {"dir_x", s.tumor.dir_x},
                {"dir_y", s.tumor.dir_y},
                {"eccentricity", s.tumor.eccentricity}}},
              {"growth", std::move(growth)},
              {"observation_times", s.observation_times},
              {"intensity",
               {{"background", s.intensity.background},
                {"brain_mean", s.intensity.brain_mean},
                {"texture_amplitude", s.intensity.texture_amplitude},
                {"edema_mean", s.intensity.edema_mean},
                {"edema_margin_mm", s.intensity.edema_margin_mm},
                {"tumor_mean", s.intensity.tumor_mean},
                {"noise_sigma", s.intensity.noise_sigma}}}};
}

/// Missing fields keep their defaults, except growth and observation_times.
inline PhantomSpec phantom_spec_from_json(const Json& j) {
  const std::string w = "phantom spec";
  if (!j.is_object()) throw InvalidInput(w + " must be a JSON object");
  PhantomSpec s;
  detail::read_optional(j, "width", s.width, w);
  detail::read_optional(j, "height", s.height, w);
  detail::read_optional(j, "pixel_spacing_mm", s.pixel_spacing, w);
  if (j.contains("brain")) {
    const Json& b = j.at("brain");
    detail::read_optional(b, "cx", s.brain.cx, w);
    detail::read_optional(b, "cy", s.brain.cy, w);
    detail::read_optional(b, "semi_x", s.brain.semi_x, w);
    detail::read_optional(b, "semi_y", s.brain.semi_y, w);
  }
  detail::read_optional(j, "texture_seed", s.texture_seed, w);
  if (j.contains("tumor")) {
    const Json& t = j.at("tumor");
    detail::read_optional(t, "cx", s.tumor.cx, w);
    detail::read_optional(t, "cy", s.tumor.cy, w);
    detail::read_optional(t, "dir_x", s.tumor.dir_x, w);
    detail::read_optional(t, "dir_y", s.tumor.dir_y, w);
    detail::read_optional(t, "eccentricity", s.tumor.eccentricity, w);
  }
  s.growth = growth_params_from_json(detail::get_field<Json>(j, "growth", w));
  s.observation_times = detail::get_field<std::vector<double>>(j, "observation_times", w);
  if (j.contains("intensity")) {
    const Json& i = j.at("intensity");
    detail::read_optional(i, "background", s.intensity.background, w);
    detail::read_optional(i, "brain_mean", s.intensity.brain_mean, w);
    detail::read_optional(i, "texture_amplitude", s.intensity.texture_amplitude, w);
    detail::read_optional(i, "edema_mean", s.intensity.edema_mean, w);
    detail::read_optional(i, "edema_margin_mm", s.intensity.edema_margin_mm, w);
    detail::read_optional(i, "tumor_mean", s.intensity.tumor_mean, w);
    detail::read_optional(i, "noise_sigma", s.intensity.noise_sigma, w);
  }
  s.validate();
  return s;
}

}  // namespace mechlearn
