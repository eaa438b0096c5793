// SPDX-License-Identifier: Apache-2.0
//
// Attention primitives and the two encoder-block flavors used by the
// models: pre-norm blocks for the vision encoder, post-norm blocks for
// the weather and fusion encoders.

#ifndef AGRIFUSE_TRANSFORMER_HPP
#define AGRIFUSE_TRANSFORMER_HPP

#include <functional>
#include <string>
#include <vector>

#include "agrifuse/tensor.hpp"

namespace agrifuse {

/// Per-head projection matrices plus the shared output projection.
/// d_model splits evenly across heads: d_head = d_model / heads.
struct MultiHeadParams {
  std::vector<Tensor> wq;  // heads x [d_model, d_head]
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor wo;               // [heads * d_head, d_model]

  std::size_t heads() const { return wq.size(); }
  std::size_t d_model() const { return wq.empty() ? 0 : wq[0].shape()[0]; }

  static MultiHeadParams make(std::size_t d_model, std::size_t heads,
                              Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Two affine maps d_model -> d_ff -> d_model with a GELU between.
struct FfnParams {
  Tensor w1, b1, w2, b2;

  static FfnParams make(std::size_t d_model, std::size_t d_ff, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct EncoderParams {
  MultiHeadParams mha;
  FfnParams ff;
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  double dropout_rate = 0.1;

  static EncoderParams make(std::size_t d_model, std::size_t heads,
                            std::size_t d_ff, double dropout, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// softmax(Q K^T / sqrt(d_k)) V. Every output row is a convex combination
/// of the rows of V.
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Self-attention: per-head projections of x, scaled attention per head,
/// column-wise concat, output projection.
Tensor multi_head(const Tensor& x, const MultiHeadParams& p);

Tensor ffn(const Tensor& x, const FfnParams& p);

/// H = LN(x + Dropout(MHA(x))); out = LN(H + Dropout(FFN(H))).
Tensor encoder_block_postnorm(const Tensor& x, const EncoderParams& p,
                              Mode mode, Rng& rng);

/// z' = MHA(LN(z)) + z; out = FFN(LN(z')) + z'. No dropout in this
/// variant, so it is deterministic in both modes.
Tensor encoder_block_prenorm(const Tensor& x, const EncoderParams& p);

}  // namespace agrifuse

#endif  // AGRIFUSE_TRANSFORMER_HPP
