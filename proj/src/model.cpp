// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/model.hpp"

#include "agrifuse/errors.hpp"

namespace agrifuse {

std::string to_string(FusionBranch branch) {
  switch (branch) {
    case FusionBranch::both:
      return "both";
    case FusionBranch::image_only:
      return "image_only";
    case FusionBranch::weather_only:
      return "weather_only";
  }
  return "both";
}

FusionBranch branch_from_string(const std::string& name) {
  if (name == "both") return FusionBranch::both;
  if (name == "image_only") return FusionBranch::image_only;
  if (name == "weather_only") return FusionBranch::weather_only;
  throw ConfigError("unknown fusion branch '" + name + "'");
}

void FusionModelConfig::finalize() {
  if (vit.out_side != weather.out_side) {
    throw ConfigError("model: vit and weather embedding sides disagree");
  }
  const std::size_t side = vit.out_side;
  fusion.in_cols = side;
  fusion.in_rows = branch == FusionBranch::both ? 2 * side : side;
}

nlohmann::json FusionModelConfig::to_json() const {
  return {
      {"branch", to_string(branch)},
      {"vit",
       {{"channels", vit.channels},
        {"image_side", vit.image_side},
        {"patch", vit.patch},
        {"dim", vit.dim},
        {"layers", vit.layers},
        {"heads", vit.heads},
        {"d_ff", vit.d_ff},
        {"out_side", vit.out_side}}},
      {"weather",
       {{"features", weather.features},
        {"tokens", weather.tokens},
        {"d_model", weather.d_model},
        {"layers", weather.layers},
        {"heads", weather.heads},
        {"d_ff", weather.d_ff},
        {"out_side", weather.out_side},
        {"dropout", weather.dropout}}},
      {"fusion",
       {{"in_rows", fusion.in_rows},
        {"in_cols", fusion.in_cols},
        {"tokens", fusion.tokens},
        {"d_model", fusion.d_model},
        {"layers", fusion.layers},
        {"heads", fusion.heads},
        {"d_ff", fusion.d_ff},
        {"dropout", fusion.dropout}}},
  };
}

FusionModelConfig FusionModelConfig::from_json(const nlohmann::json& j) {
  FusionModelConfig c;
  c.branch = branch_from_string(j.value("branch", "both"));
  const auto& v = j.at("vit");
  c.vit.channels = v.at("channels");
  c.vit.image_side = v.at("image_side");
  c.vit.patch = v.at("patch");
  c.vit.dim = v.at("dim");
  c.vit.layers = v.at("layers");
  c.vit.heads = v.at("heads");
  c.vit.d_ff = v.at("d_ff");
  c.vit.out_side = v.at("out_side");
  const auto& w = j.at("weather");
  c.weather.features = w.at("features");
  c.weather.tokens = w.at("tokens");
  c.weather.d_model = w.at("d_model");
  c.weather.layers = w.at("layers");
  c.weather.heads = w.at("heads");
  c.weather.d_ff = w.at("d_ff");
  c.weather.out_side = w.at("out_side");
  c.weather.dropout = w.at("dropout");
  const auto& f = j.at("fusion");
  c.fusion.in_rows = f.at("in_rows");
  c.fusion.in_cols = f.at("in_cols");
  c.fusion.tokens = f.at("tokens");
  c.fusion.d_model = f.at("d_model");
  c.fusion.layers = f.at("layers");
  c.fusion.heads = f.at("heads");
  c.fusion.d_ff = f.at("d_ff");
  c.fusion.dropout = f.at("dropout");
  return c;
}

FusionModel FusionModel::make(FusionModelConfig config, Rng& rng) {
  config.finalize();
  FusionModel m;
  m.config = config;
  if (m.has_vit()) m.vit = ViTParams::make(config.vit, rng);
  if (m.has_weather()) {
    m.weather = WeatherEncoderParams::make(config.weather, rng);
  }
  m.fusion = FusionParams::make(config.fusion, rng);
  for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
    m.stats.mean[i] = 0.0;
    m.stats.stddev[i] = 1.0;
  }
  return m;
}

Tensor FusionModel::forward(const Tensor& image, const Tensor& features,
                            Mode mode, Rng& rng) {
  switch (config.branch) {
    case FusionBranch::both: {
      Tensor visual = vit_forward(image, vit, mode);
      Tensor wx = weather_forward(features, weather, mode, rng);
      return fusion_forward(fuse(wx, visual), fusion, mode, rng);
    }
    case FusionBranch::image_only: {
      Tensor visual = vit_forward(image, vit, mode);
      return fusion_forward(visual, fusion, mode, rng);
    }
    case FusionBranch::weather_only: {
      Tensor wx = weather_forward(features, weather, mode, rng);
      return fusion_forward(wx, fusion, mode, rng);
    }
  }
  throw ContractError("unreachable fusion branch");
}

void FusionModel::visit(const ParamVisitor& fn) {
  if (has_vit()) vit.visit("vit", fn);
  if (has_weather()) weather.visit("weather", fn);
  fusion.visit("fusion", fn);
}

ParamMap FusionModel::params() {
  ParamMap map;
  visit([&](const std::string& name, Tensor& t) {
    map.emplace_back(name, &t);
  });
  return map;
}

void FusionModel::save(const std::filesystem::path& dir,
                       const nlohmann::json& extra) const {
  nlohmann::json hyper = {
      {"model", config.to_json()},
      {"weather_stats",
       {{"mean", stats.mean},
        {"stddev", stats.stddev},
        {"layout", "t3h3"}}},
  };
  if (!extra.is_null() && !extra.empty()) hyper["extra"] = extra;
  auto* self = const_cast<FusionModel*>(this);
  save_checkpoint(dir, self->params(), hyper);
}

FusionModel FusionModel::load(const std::filesystem::path& dir) {
  const nlohmann::json hyper = read_checkpoint_hyper(dir);
  Rng rng(0);  // values are overwritten by the checkpoint
  FusionModel m = make(FusionModelConfig::from_json(hyper.at("model")), rng);
  load_checkpoint(dir, m.params());
  const auto& ws = hyper.at("weather_stats");
  for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
    m.stats.mean[i] = ws.at("mean")[i];
    m.stats.stddev[i] = ws.at("stddev")[i];
  }
  return m;
}

}  // namespace agrifuse
