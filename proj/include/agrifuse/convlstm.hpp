// SPDX-License-Identifier: Apache-2.0
//
// Daily image generation: linear interpolation with Gaussian noise builds
// training sequences, and a stacked peephole ConvLSTM predicts the next
// frame from the previous three, filling the gaps of a sparse series.

#ifndef AGRIFUSE_CONVLSTM_HPP
#define AGRIFUSE_CONVLSTM_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "agrifuse/dates.hpp"
#include "agrifuse/serialize.hpp"
#include "agrifuse/tensor.hpp"

namespace agrifuse {

enum class Provenance { real, interpolated, generated };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& name);

struct SeriesFrame {
  Date date;
  Tensor image;  // [C,H,W]
  Provenance provenance = Provenance::real;
};

/// Date-ordered frames of one plot/index. A complete series has
/// consecutive daily dates.
struct ImageSeries {
  std::vector<SeriesFrame> frames;

  void validate() const;  // strictly increasing dates, consistent shapes
  bool complete() const;
  const SeriesFrame* find(const Date& date) const;
};

/// Convex interpolation (a*(k-i) + b*i) / k for a gap of k days, 0 < i < k.
Tensor linear_interpolate(const Tensor& a, const Tensor& b, long i, long k);

/// Adds iid Gaussian(0, sigma^2) per element and clamps to [0,1].
Tensor inject_noise(const Tensor& image, double sigma, Rng& rng);

/// Fills every gap between consecutive real acquisitions with linear
/// interpolation; real frames pass through untouched.
ImageSeries interpolate_series(const ImageSeries& sparse);

struct ConvLstmConfig {
  std::size_t channels = 3;   // image channels (one RGB-coded index)
  std::size_t hidden = 16;    // hidden channels per block
  std::size_t blocks = 4;
  std::size_t kernel = 3;
  std::size_t side = 224;     // spatial side; peepholes bind to it
  std::size_t context = 3;    // frames consumed per prediction

  void validate() const;
  nlohmann::json to_json() const;
  static ConvLstmConfig from_json(const nlohmann::json& j);
};

/// One ConvLSTM block: gate convolutions, element-wise peephole weights,
/// biases, and the batch-norm that follows the cell.
struct ConvLstmBlockParams {
  Tensor w_di, w_hi, w_ci, b_i;  // input gate
  Tensor w_df, w_hf, w_cf, b_f;  // forget gate
  Tensor w_dc, w_hc, b_c;        // cell candidate
  Tensor w_do, w_ho, w_co, b_o;  // output gate
  BatchNorm2d bn;
};

struct ConvLstmCellState {
  Tensor h;  // hidden map [hidden, side, side]
  Tensor c;  // cell state, same shape
  Tensor input_gate, forget_gate, output_gate;  // each in (0,1) elementwise
};

struct ConvLstmModel {
  ConvLstmConfig config;
  std::vector<ConvLstmBlockParams> blocks;
  Tensor readout_w;  // [channels, hidden, 1, 1]
  Tensor readout_b;  // [channels]

  static ConvLstmModel make(const ConvLstmConfig& config, Rng& rng);
  void visit_trainable(const ParamVisitor& fn);
  void visit_state(const ParamVisitor& fn);  // trainable + running stats
  ParamMap trainable();

  void save(const std::filesystem::path& dir) const;
  static ConvLstmModel load(const std::filesystem::path& dir);
};

/// One timestep of one block:
///   i = sig(W_di*D + W_hi*h + W_ci.C + b_i)
///   f = sig(W_df*D + W_hf*h + W_cf.C + b_f)
///   C' = f.C + i.tanh(W_dc*D + W_hc*h + b_c)
///   o = sig(W_do*D + W_ho*h + W_co.C' + b_o)
///   h' = o.tanh(C')
/// where * is a same-padded convolution and . an element-wise product.
ConvLstmCellState cell_step(const Tensor& input, const Tensor& h_prev,
                            const Tensor& c_prev,
                            const ConvLstmBlockParams& p);

/// Runs each block over the context frames from zero state; batch-norm and
/// leaky-ReLU follow every cell output; a 1x1 readout maps the last hidden
/// state of the final block to image channels, clamped to [0,1].
Tensor convlstm_forward(const std::vector<Tensor>& inputs, ConvLstmModel& m,
                        Mode mode);

/// Fills every missing date of a sparse series: the first context window
/// bootstraps by linear interpolation, everything later is predicted from
/// the previous three daily frames. Real frames are never overwritten.
ImageSeries generate_daily(const ImageSeries& sparse, ConvLstmModel& model);

/// Series directory: one AGT1 file per frame (YYYY-MM-DD.agt) plus a
/// manifest listing dates and provenance.
void save_series(const std::filesystem::path& dir, const ImageSeries& series);
ImageSeries load_series(const std::filesystem::path& dir);

}  // namespace agrifuse

#endif  // AGRIFUSE_CONVLSTM_HPP
