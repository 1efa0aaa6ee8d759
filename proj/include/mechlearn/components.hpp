#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mechlearn/diffusion.hpp"
#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"
#include "mechlearn/metrics.hpp"
#include "mechlearn/plugin.hpp"

namespace mechlearn {

enum class DenoiserVariant { kAnalyticGaussian, kAnalyticDelta, kAnalyticMixture, kPlugin };

/// Which noise predictor to run. The analytic variants are centered on the
/// reference image handed to make_denoiser.
struct DenoiserSpec {
  DenoiserVariant variant = DenoiserVariant::kAnalyticMixture;
  double s0 = 0.02;                   // prior intensity std (gaussian, mixture)
  double prior_weight = 0.001;        // mixture: prior tumor probability per brain pixel
  std::optional<double> tumor_level;  // mixture: tumor intensity; estimated from the reference if unset
  std::string command;                // plugin

  void validate() const {
    if (!(s0 >= 0.0) || !std::isfinite(s0)) throw InvalidInput("denoiser s0 must be finite and non-negative");
    if (!(prior_weight >= 0.0 && prior_weight < 1.0)) throw InvalidInput("prior weight must lie in [0, 1)");
    if (tumor_level && !std::isfinite(*tumor_level)) throw InvalidInput("tumor level must be finite");
    if (variant == DenoiserVariant::kPlugin && command.empty()) throw InvalidInput("plugin denoiser needs a command");
  }
};

inline std::string variant_name(const DenoiserSpec& s) {
  switch (s.variant) {
    case DenoiserVariant::kAnalyticGaussian: return "analytic-gaussian";
    case DenoiserVariant::kAnalyticDelta: return "analytic-delta";
    case DenoiserVariant::kAnalyticMixture: return "analytic-mixture";
    case DenoiserVariant::kPlugin: return "plugin:" + s.command;
  }
  return "";
}

/// Parses `analytic-gaussian`, `analytic-delta`, `analytic-mixture` or
/// `plugin:CMD`, keeping the numeric fields of `base`.
inline DenoiserSpec parse_denoiser(const std::string& text, DenoiserSpec base = {}) {
  if (text == "analytic-gaussian") base.variant = DenoiserVariant::kAnalyticGaussian;
  else if (text == "analytic-delta") base.variant = DenoiserVariant::kAnalyticDelta;
  else if (text == "analytic-mixture") base.variant = DenoiserVariant::kAnalyticMixture;
  else if (text.rfind("plugin:", 0) == 0) {
    base.variant = DenoiserVariant::kPlugin;
    base.command = text.substr(7);
  } else {
    throw InvalidInput("unknown denoiser '" + text + "'");
  }
  base.validate();
  return base;
}

enum class RegressorVariant { kSoftArea, kPlugin };

struct RegressorSpec {
  RegressorVariant variant = RegressorVariant::kSoftArea;
  double tau = 0.6;
  double softness = 0.02;
  std::string command;

  void validate() const {
    if (!std::isfinite(tau)) throw InvalidInput("tau must be finite");
    if (!(softness > 0.0) || !std::isfinite(softness)) throw InvalidInput("softness must be positive");
    if (variant == RegressorVariant::kPlugin && command.empty()) throw InvalidInput("plugin regressor needs a command");
  }
};

inline std::string variant_name(const RegressorSpec& s) {
  return s.variant == RegressorVariant::kSoftArea ? "soft-area" : "plugin:" + s.command;
}

inline RegressorSpec parse_regressor(const std::string& text, RegressorSpec base = {}) {
  if (text == "soft-area") base.variant = RegressorVariant::kSoftArea;
  else if (text.rfind("plugin:", 0) == 0) {
    base.variant = RegressorVariant::kPlugin;
    base.command = text.substr(7);
  } else {
    throw InvalidInput("unknown regressor '" + text + "'");
  }
  base.validate();
  return base;
}

/// Mean intensity of the bright Otsu class among brain pixels.
inline double estimate_tumor_level(const Image2D& ref, const BinaryMask& brain) {
  if (!brain.same_shape(ref)) throw InvalidInput("brain mask shape differs from image");
  std::vector<double> vals;
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (brain[i]) vals.push_back(ref[i]);
  if (vals.empty()) throw InvalidInput("brain mask is empty");
  const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
  if (!(*mx > *mn)) return *mx;
  Image2D strip(static_cast<int>(vals.size()), 1);
  for (std::size_t i = 0; i < vals.size(); ++i) strip[i] = vals[i];
  const double thr = otsu_threshold(strip);
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : vals)
    if (v > thr) {
      sum += v;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : *mx;
}

inline std::unique_ptr<Denoiser> make_denoiser(const DenoiserSpec& spec, const NoiseSchedule& sched,
                                               const Image2D& ref, const BinaryMask& brain) {
  spec.validate();
  switch (spec.variant) {
    case DenoiserVariant::kAnalyticGaussian: return std::make_unique<GaussianDenoiser>(sched, ref, spec.s0);
    case DenoiserVariant::kAnalyticDelta: return std::make_unique<GaussianDenoiser>(sched, ref, 0.0);
    case DenoiserVariant::kAnalyticMixture: {
      if (!brain.same_shape(ref)) throw InvalidInput("brain mask shape differs from image");
      Image2D weight(ref.width(), ref.height(), ref.pixel_spacing());
      for (std::size_t i = 0; i < ref.size(); ++i) weight[i] = brain[i] ? spec.prior_weight : 0.0;
      const double level = spec.tumor_level ? *spec.tumor_level : estimate_tumor_level(ref, brain);
      return std::make_unique<MixtureDenoiser>(sched, ref, spec.s0, level, std::move(weight));
    }
    case DenoiserVariant::kPlugin: return std::make_unique<PluginDenoiser>(spec.command);
  }
  throw InvalidInput("unknown denoiser variant");
}

inline std::unique_ptr<Regressor> make_regressor(const RegressorSpec& spec, const NoiseSchedule& sched,
                                                 const BinaryMask& brain) {
  spec.validate();
  if (spec.variant == RegressorVariant::kPlugin) return std::make_unique<PluginRegressor>(spec.command);
  return std::make_unique<SoftAreaRegressor>(sched, SoftAreaSpec{spec.tau, spec.softness, brain});
}

}  // namespace mechlearn
