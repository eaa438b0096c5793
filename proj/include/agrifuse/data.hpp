// SPDX-License-Identifier: Apache-2.0
//
// Data pipeline: vegetation indices from synthetic Sentinel-2-like bands,
// RGB colormap encoding, weather/label ingestion, the joint-dependence
// synthetic scene generator, and sample assembly for the fusion models.

#ifndef AGRIFUSE_DATA_HPP
#define AGRIFUSE_DATA_HPP

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "agrifuse/convlstm.hpp"
#include "agrifuse/weather.hpp"

namespace agrifuse {

// ---- vegetation indices -----------------------------------------------------

/// Channel stacking order of the fused image: NDCI, NDVI, NDMI.
enum class IndexKind { ndci = 0, ndvi = 1, ndmi = 2 };

inline constexpr std::array<IndexKind, 3> kAllIndices = {
    IndexKind::ndci, IndexKind::ndvi, IndexKind::ndmi};

std::string to_string(IndexKind k);
IndexKind index_from_string(const std::string& name);

/// Reflectance rasters for one acquisition. B04/B05/B08 share the 10 m
/// grid; B8A/B11 come at half resolution (20 m) and are upsampled onto
/// the common grid before any index computation.
struct SceneBands {
  Date date;
  std::string plot_id;
  Tensor b04, b05, b08;  // [S,S]
  Tensor b8a, b11;       // [S/2,S/2]
};

/// NDVI=(B08-B04)/(B08+B04), NDCI=(B05-B04)/(B05+B04),
/// NDMI=(B8A-B11)/(B8A+B11); zero denominators map to 0.
Tensor compute_index(const SceneBands& bands, IndexKind kind);

/// Bilinear plane resize with half-pixel alignment; identity when sizes
/// already match.
Tensor bilinear_resize(const Tensor& plane, std::size_t out_h,
                       std::size_t out_w);

/// Version tag of the red->yellow->green colormap table below; recorded in
/// every dataset manifest.
inline constexpr const char* kColormapVersion = "rg-v1";

/// Piecewise-linear colormap stops over the index range [-1, 1].
struct ColormapStop {
  double value;
  double r, g, b;
};
inline constexpr std::array<ColormapStop, 3> kColormap = {{
    {-1.0, 1.0, 0.0, 0.0},  // stressed: red
    {0.0, 1.0, 1.0, 0.0},   // transition: yellow
    {1.0, 0.0, 1.0, 0.0},   // healthy: green
}};

/// Colormap encoding plus bilinear resize to [3, side, side] in [0,1].
/// Out-of-range index values clamp; the count lands in *clamped if given.
Tensor index_to_rgb(const Tensor& index, std::size_t side,
                    std::size_t* clamped = nullptr);

// ---- CSV ingestion ----------------------------------------------------------

inline constexpr const char* kWeatherHeader =
    "date,precip_mm,rain_var,rain_dur_h,tmin_c,tavg_c,tmax_c,hmin_pct,"
    "havg_pct,hmax_pct,pot_evap_mm,sun_h";

std::vector<WeatherRecord> load_weather(const std::filesystem::path& csv);
void save_weather(const std::filesystem::path& csv,
                  const std::vector<WeatherRecord>& records);

struct LabelRecord {
  Date date;
  std::string plot_id;
  int label = 0;
};

std::vector<LabelRecord> load_labels(const std::filesystem::path& csv);
void save_labels(const std::filesystem::path& csv,
                 const std::vector<LabelRecord>& labels);

// ---- synthetic scenes -------------------------------------------------------

/// Hidden generative state of one day, kept in the dataset manifest so
/// tests can score the generative rule itself.
struct DayTruth {
  Date date;
  int label = 0;
  bool image_stress = false;    // stress patch painted into the imagery
  bool weather_regime = false;  // warm-humid weather regime active
  std::array<bool, 3> visible{};  // stress rendered per index (NDCI,NDVI,NDMI)
};

struct SyntheticSpec {
  std::size_t plots = 4;
  std::size_t years = 4;
  int start_year = 2018;
  std::size_t season_days = 92;  // June 1 through August 31
  std::size_t image_side = 64;   // RGB output side
  std::size_t base_side = 32;    // band raster side (even)
  double acquisition_gap_mean = 4.0;
  std::string scene = "field";  // "field" or "ramp"
  std::vector<std::size_t> positive_years = {0, 3};
  int positive_month_begin = 7;
  int positive_month_end = 8;
  double image_confounder_prob = 0.3;
  double weather_confounder_prob = 0.3;
  std::array<double, 3> stress_visibility = {1.0, 0.85, 0.65};
  double stress_depth = 0.28;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

/// Writes the full dataset layout:
///   out/{plot}/{index}/   sparse real series (one AGT1 file per frame)
///   out/weather.csv       one row per season day across all years
///   out/labels.csv        date,plot_id,label
///   out/manifest.json     spec, seed, colormap version, day truths
/// Deterministic: a fixed (spec, seed) pair reproduces every byte.
void synthesize_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                        const std::filesystem::path& out);

/// Best achievable accuracy of a classifier that observes only the given
/// latent factor, scored exhaustively against the recorded labels.
double single_modality_ceiling(const std::vector<DayTruth>& truths,
                               bool use_image_factor);

std::vector<DayTruth> truths_from_manifest(const nlohmann::json& manifest);

// ---- dataset access ---------------------------------------------------------

struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> plots;
  std::vector<WeatherRecord> weather;
  std::vector<LabelRecord> labels;
  nlohmann::json manifest;

  ImageSeries series(const std::string& plot, IndexKind kind) const;
  std::filesystem::path series_dir(const std::string& plot,
                                   IndexKind kind) const;
};

Dataset open_dataset(const std::filesystem::path& root);

/// Splits a multi-season series into contiguous daily segments by calendar
/// year; interpolation and generation run within seasons, never across.
std::vector<ImageSeries> split_by_year(const ImageSeries& series);

// ---- samples ----------------------------------------------------------------

struct Sample {
  Tensor image;     // [3*|indices|, side, side]
  Tensor features;  // [11], standardized
  int label = 0;
  Date date;
  std::string plot_id;
  Provenance provenance = Provenance::real;  // worst provenance of channels
};

/// Daily-aligned stacking of RGB-coded index images with standardized
/// weather and labels; samples sort by (plot, date). A date present in one
/// source but not the other raises InputError naming the date.
std::vector<Sample> assemble(
    const Dataset& data,
    const std::map<std::string, std::array<ImageSeries, 3>>& complete,
    const FeatureStats& stats,
    const std::vector<IndexKind>& channels = {kAllIndices.begin(),
                                              kAllIndices.end()});

}  // namespace agrifuse

#endif  // AGRIFUSE_DATA_HPP
