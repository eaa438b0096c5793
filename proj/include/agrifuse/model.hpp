// SPDX-License-Identifier: Apache-2.0
//
// The full classifier: vision encoder and weather encoder feeding the
// fusion bottleneck. Ablation branches drop one encoder and feed the
// remaining square embedding straight into the bottleneck.

#ifndef AGRIFUSE_MODEL_HPP
#define AGRIFUSE_MODEL_HPP

#include <filesystem>
#include <string>

#include <json.hpp>

#include "agrifuse/fusion.hpp"
#include "agrifuse/serialize.hpp"
#include "agrifuse/vit.hpp"
#include "agrifuse/weather.hpp"

namespace agrifuse {

enum class FusionBranch { both, image_only, weather_only };

std::string to_string(FusionBranch branch);
FusionBranch branch_from_string(const std::string& name);

struct FusionModelConfig {
  ViTConfig vit;
  WeatherEncoderConfig weather;
  FusionConfig fusion;
  FusionBranch branch = FusionBranch::both;

  /// Fixes fusion.in_rows/in_cols from the branch and embedding sides.
  void finalize();
  nlohmann::json to_json() const;
  static FusionModelConfig from_json(const nlohmann::json& j);
};

struct FusionModel {
  FusionModelConfig config;
  ViTParams vit;               // unused in weather_only
  WeatherEncoderParams weather;  // unused in image_only
  FusionParams fusion;
  FeatureStats stats;  // weather standardization fitted on the train split

  static FusionModel make(FusionModelConfig config, Rng& rng);

  bool has_vit() const { return config.branch != FusionBranch::weather_only; }
  bool has_weather() const {
    return config.branch != FusionBranch::image_only;
  }

  /// image: [C, S, S] per the vit config; features: standardized [11].
  Tensor forward(const Tensor& image, const Tensor& features, Mode mode,
                 Rng& rng);

  void visit(const ParamVisitor& fn);
  ParamMap params();

  void save(const std::filesystem::path& dir,
            const nlohmann::json& extra = {}) const;
  static FusionModel load(const std::filesystem::path& dir);
};

}  // namespace agrifuse

#endif  // AGRIFUSE_MODEL_HPP
