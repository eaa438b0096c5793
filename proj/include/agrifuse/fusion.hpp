// SPDX-License-Identifier: Apache-2.0
//
// Fusion bottleneck encoder: the stacked weather/visual embeddings expand
// into a token sequence, run through post-norm blocks, and collapse to two
// class logits.

#ifndef AGRIFUSE_FUSION_HPP
#define AGRIFUSE_FUSION_HPP

#include <vector>

#include "agrifuse/transformer.hpp"

namespace agrifuse {

struct Classification {
  int label = 0;          // 1 = disease predicted
  double p_positive = 0;  // softmax probability of the positive class
};

struct FusionConfig {
  std::size_t in_rows = 28;  // 14 weather rows stacked on 14 visual rows
  std::size_t in_cols = 14;
  std::size_t tokens = 8;
  std::size_t d_model = 64;
  std::size_t layers = 12;
  std::size_t heads = 8;
  std::size_t d_ff = 128;
  double dropout = 0.1;

  std::size_t flat_in() const { return in_rows * in_cols; }
  std::size_t expanded() const { return tokens * d_model; }
  void validate() const;
};

struct FusionParams {
  FusionConfig config;
  Tensor expand_w;  // [in_rows*in_cols, tokens*d_model]
  Tensor expand_b;
  std::vector<EncoderParams> blocks;
  Tensor head_w;  // [tokens*d_model, 2]
  Tensor head_b;  // [2]

  static FusionParams make(const FusionConfig& config, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Row-wise concatenation: weather rows first, visual rows below.
Tensor fuse(const Tensor& weather_embedding, const Tensor& visual_embedding);

/// flatten -> dropout -> expansion affine -> encoder blocks -> dropout ->
/// flatten -> affine -> 2 logits.
Tensor fusion_forward(const Tensor& fused, const FusionParams& p, Mode mode,
                      Rng& rng);

/// softmax + argmax; a tie predicts the negative class.
Classification classify(const Tensor& logits);

}  // namespace agrifuse

#endif  // AGRIFUSE_FUSION_HPP
