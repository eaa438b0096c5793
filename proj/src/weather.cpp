// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/weather.hpp"

#include <cmath>

#include "agrifuse/errors.hpp"

namespace agrifuse {

void WeatherRecord::validate() const {
  const auto bad = [this](const std::string& field) {
    throw InputError("weather record " + date.to_string() +
                     ": invalid field " + field);
  };
  for (double v : features()) {
    if (!std::isfinite(v)) bad("(non-finite value)");
  }
  if (tmin_c > tavg_c || tavg_c > tmax_c) bad("temperature ordering");
  if (hmin_pct > havg_pct || havg_pct > hmax_pct) bad("humidity ordering");
  if (hmin_pct < 0 || hmax_pct > 100) bad("humidity range");
  if (precip_mm < 0) bad("precip_mm");
  if (rain_dur_h < 0) bad("rain_dur_h");
  if (pot_evap_mm < 0) bad("pot_evap_mm");
  if (sun_h < 0) bad("sun_h");
}

std::array<double, kWeatherFeatures> WeatherRecord::features() const {
  return {precip_mm, rain_var,  rain_dur_h,  tmin_c,      tavg_c, tmax_c,
          hmin_pct,  havg_pct,  hmax_pct,    pot_evap_mm, sun_h};
}

FeatureStats FeatureStats::fit(const std::vector<WeatherRecord>& records) {
  if (records.empty()) {
    throw InputError("feature statistics need at least one record");
  }
  FeatureStats stats;
  for (const auto& r : records) {
    const auto f = r.features();
    for (std::size_t i = 0; i < kWeatherFeatures; ++i) stats.mean[i] += f[i];
  }
  for (double& m : stats.mean) m /= static_cast<double>(records.size());
  for (const auto& r : records) {
    const auto f = r.features();
    for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
      const double d = f[i] - stats.mean[i];
      stats.stddev[i] += d * d;
    }
  }
  for (double& s : stats.stddev) {
    s = std::sqrt(s / static_cast<double>(records.size()));
    if (s < 1e-9) s = 1.0;  // constant feature: leave it centered only
  }
  return stats;
}

Tensor FeatureStats::standardize(const WeatherRecord& record) const {
  record.validate();
  const auto f = record.features();
  std::vector<double> out(kWeatherFeatures);
  for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
    out[i] = (f[i] - mean[i]) / stddev[i];
  }
  return Tensor::from_vector({kWeatherFeatures}, std::move(out));
}

void WeatherEncoderConfig::validate() const {
  if (features == 0 || tokens == 0 || d_model == 0 || layers == 0 ||
      heads == 0 || d_ff == 0 || out_side == 0) {
    throw ConfigError("weather encoder: all dimensions must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("weather encoder: d_model must split across heads");
  }
}

WeatherEncoderParams WeatherEncoderParams::make(
    const WeatherEncoderConfig& config, Rng& rng) {
  config.validate();
  WeatherEncoderParams p;
  p.config = config;
  p.expand_w = Tensor::xavier_uniform({config.features, config.expanded()},
                                      config.features, config.expanded(), rng);
  p.expand_b = Tensor::zeros({config.expanded()}, true);
  for (std::size_t l = 0; l < config.layers; ++l) {
    p.blocks.push_back(EncoderParams::make(config.d_model, config.heads,
                                           config.d_ff, config.dropout, rng));
  }
  const std::size_t out = config.out_side * config.out_side;
  p.proj_w = Tensor::xavier_uniform({config.expanded(), out},
                                    config.expanded(), out, rng);
  p.proj_b = Tensor::zeros({out}, true);
  return p;
}

void WeatherEncoderParams::visit(const std::string& prefix,
                                 const ParamVisitor& fn) {
  fn(prefix + ".expand.w", expand_w);
  fn(prefix + ".expand.b", expand_b);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].visit(prefix + ".block" + std::to_string(l), fn);
  }
  fn(prefix + ".proj.w", proj_w);
  fn(prefix + ".proj.b", proj_b);
}

Tensor weather_expand(const Tensor& features, const WeatherEncoderParams& p,
                      Mode mode, Rng& rng) {
  const WeatherEncoderConfig& c = p.config;
  if (features.shape() != Shape{c.features}) {
    throw ShapeError("weather: features " + shape_str(features.shape()) +
                     ", expected (" + std::to_string(c.features) + ")");
  }
  for (double v : features.values()) {
    if (!std::isfinite(v)) {
      throw InputError("weather: non-finite feature value");
    }
  }
  Tensor row = reshape(features, {1, c.features});
  Tensor dropped = dropout(row, c.dropout, mode, rng);
  Tensor expanded = add_bias(matmul(dropped, p.expand_w), p.expand_b);
  return reshape(expanded, {c.tokens, c.d_model});
}

Tensor weather_forward(const Tensor& features, const WeatherEncoderParams& p,
                       Mode mode, Rng& rng) {
  const WeatherEncoderConfig& c = p.config;
  Tensor a = weather_expand(features, p, mode, rng);
  for (const auto& block : p.blocks) {
    a = encoder_block_postnorm(a, block, mode, rng);
  }
  Tensor flat = reshape(dropout(a, c.dropout, mode, rng), {1, c.expanded()});
  Tensor out = add_bias(matmul(flat, p.proj_w), p.proj_b);
  return reshape(out, {c.out_side, c.out_side});
}

}  // namespace agrifuse
