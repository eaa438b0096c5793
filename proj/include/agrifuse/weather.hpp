// SPDX-License-Identifier: Apache-2.0
//
// Weather attention encoder: one day of station measurements expands into
// a short token sequence, runs through post-norm encoder blocks, and
// projects to the square weather embedding consumed by the fusion stage.

#ifndef AGRIFUSE_WEATHER_HPP
#define AGRIFUSE_WEATHER_HPP

#include <array>
#include <vector>

#include "agrifuse/dates.hpp"
#include "agrifuse/transformer.hpp"

namespace agrifuse {

inline constexpr std::size_t kWeatherFeatures = 11;

/// One day of station measurements. Feature order matches the ingestion
/// CSV columns: precipitation, rainfall variability, rainfall duration,
/// min/avg/max temperature, min/avg/max humidity, potential evaporation,
/// sun exposure ("t3h3" layout: three statistics for both temperature and
/// humidity).
struct WeatherRecord {
  Date date;
  double precip_mm = 0;
  double rain_var = 0;
  double rain_dur_h = 0;
  double tmin_c = 0;
  double tavg_c = 0;
  double tmax_c = 0;
  double hmin_pct = 0;
  double havg_pct = 0;
  double hmax_pct = 0;
  double pot_evap_mm = 0;
  double sun_h = 0;

  /// Throws InputError naming the violated field.
  void validate() const;
  std::array<double, kWeatherFeatures> features() const;
};

/// Per-feature z-score statistics, fitted on the training split and stored
/// in checkpoint manifests so evaluation uses the same normalization.
struct FeatureStats {
  std::array<double, kWeatherFeatures> mean{};
  std::array<double, kWeatherFeatures> stddev{};

  static FeatureStats fit(const std::vector<WeatherRecord>& records);
  Tensor standardize(const WeatherRecord& record) const;
};

struct WeatherEncoderConfig {
  std::size_t features = kWeatherFeatures;
  std::size_t tokens = 8;
  std::size_t d_model = 64;
  std::size_t layers = 12;
  std::size_t heads = 8;
  std::size_t d_ff = 128;
  std::size_t out_side = 14;
  double dropout = 0.1;

  std::size_t expanded() const { return tokens * d_model; }
  void validate() const;
};

struct WeatherEncoderParams {
  WeatherEncoderConfig config;
  Tensor expand_w;  // [features, tokens*d_model]
  Tensor expand_b;  // [tokens*d_model]
  std::vector<EncoderParams> blocks;
  Tensor proj_w;  // [tokens*d_model, out_side^2]
  Tensor proj_b;  // [out_side^2]

  static WeatherEncoderParams make(const WeatherEncoderConfig& config,
                                   Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Dropout on the standardized input, then the expansion affine, reshaped
/// to a [tokens, d_model] sequence.
Tensor weather_expand(const Tensor& features, const WeatherEncoderParams& p,
                      Mode mode, Rng& rng);

/// expand -> encoder blocks -> dropout -> flatten -> affine -> (out,out).
Tensor weather_forward(const Tensor& features, const WeatherEncoderParams& p,
                       Mode mode, Rng& rng);

}  // namespace agrifuse

#endif  // AGRIFUSE_WEATHER_HPP
