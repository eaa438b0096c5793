// SPDX-License-Identifier: Apache-2.0
//
// Training loops: leave-one-year-out cross-validation of the ConvLSTM
// generator over the noise grid, and end-to-end fusion training with the
// cosine-warmup schedule and early stopping.

#ifndef AGRIFUSE_TRAIN_HPP
#define AGRIFUSE_TRAIN_HPP

#include <filesystem>
#include <optional>
#include <vector>

#include "agrifuse/data.hpp"
#include "agrifuse/model.hpp"
#include "agrifuse/optim.hpp"

namespace agrifuse {

/// External run configuration (JSON file interface).
struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t epochs = 600;
  std::size_t warmup = 100;
  double lr = 1e-6;
  std::size_t batch = 8;
  std::size_t patience = 30;
  double min_delta = 1e-4;
  std::vector<double> sigma_grid = {0.04, 0.06, 0.08, 0.10, 0.12,
                                    0.14, 0.16, 0.18, 0.20};
  std::vector<int> train_years;
  std::vector<int> test_years;
  // weather/fusion encoder geometry (paper defaults)
  std::size_t layers = 12;
  std::size_t heads = 8;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t tokens = 8;
  double dropout = 0.1;
  // vision encoder geometry (paper defaults)
  std::size_t vit_dim = 768;
  std::size_t vit_layers = 12;
  std::size_t vit_heads = 8;
  std::size_t vit_d_ff = 3072;
  std::size_t patch = 16;
  std::size_t image_side = 224;
  // generator geometry and its training loop
  std::size_t conv_hidden = 16;
  std::size_t conv_blocks = 4;
  std::size_t conv_kernel = 3;
  std::size_t conv_steps = 150;
  std::size_t conv_batch = 4;
  double conv_lr = 2e-3;
  double gen_sigma = 0.06;
  std::vector<std::string> indices = {"ndci", "ndvi", "ndmi"};
  double val_fraction = 0.15;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::filesystem::path& path);

  std::vector<IndexKind> index_kinds() const;
  FusionModelConfig model_config(FusionBranch branch) const;
  ConvLstmConfig convlstm_config() const;
};

/// Reads AGRIFUSE_THREADS (>= 1); data-parallel workers default to one.
std::size_t worker_count();

// ---- ConvLSTM cross-validation -------------------------------------------------

struct ConvCvCell {
  int fold_year = 0;
  double sigma = 0.0;
  double rmse = 0.0;
  std::size_t frames_scored = 0;
};

struct ConvCvReport {
  IndexKind index;
  std::vector<ConvCvCell> cells;        // fold-major, sigma-minor
  std::vector<int> fold_years;
  double overall_mean = 0.0;
  double fold_mean(int year) const;
};

/// Leave-one-year-out protocol over the sigma grid: per fold and sigma,
/// trains on the interpolated+noised series of the other years and scores
/// RMSE on the held-out year's real frames, each predicted from the three
/// preceding daily frames. Folds with no scorable real frame are skipped
/// with a warning on stderr.
std::vector<ConvCvReport> train_convlstm_cv(const Dataset& data,
                                            const RunConfig& config);

nlohmann::json cv_report_json(const std::vector<ConvCvReport>& reports,
                              const RunConfig& config);

/// Trains one generator per configured index on every year at gen_sigma
/// and saves the checkpoints under out/models/<index>/.
void train_generation_models(const Dataset& data, const RunConfig& config,
                             const std::filesystem::path& out);

// ---- fusion training -------------------------------------------------------------

struct FusionTrainResult {
  FusionModel model;
  nlohmann::json metrics;  // loss curves, early-stop epoch, config hash
};

/// Assembles samples for the configured index channels from a complete
/// (post-generation) dataset, restricted to the given years.
std::vector<Sample> gather_samples(const Dataset& data,
                                   const RunConfig& config,
                                   const std::vector<int>& years,
                                   const FeatureStats& stats);

/// Weather standardization fitted on the train-year records only.
FeatureStats fit_train_stats(const Dataset& data,
                             const std::vector<int>& years);

/// End-to-end training (vision + weather + fusion jointly) with Adam,
/// cosine warmup, and early stopping on the per-year tail validation
/// slice. Returns the best model by validation loss.
FusionTrainResult train_fusion(const Dataset& data, const RunConfig& config,
                               FusionBranch branch = FusionBranch::both);

/// Capacity sanity loop: repeats Adam steps on one fixed batch without
/// dropout; returns the per-step loss trajectory.
std::vector<double> overfit_one_batch(const std::vector<Sample>& batch,
                                      FusionModel& model, std::size_t steps,
                                      double lr, std::uint64_t seed);

}  // namespace agrifuse

#endif  // AGRIFUSE_TRAIN_HPP
