// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/transformer.hpp"

#include <cmath>

#include "agrifuse/errors.hpp"

namespace agrifuse {

MultiHeadParams MultiHeadParams::make(std::size_t d_model, std::size_t heads,
                                      Rng& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("multi_head: d_model " + std::to_string(d_model) +
                      " does not split evenly across " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t d_head = d_model / heads;
  MultiHeadParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.wq.push_back(Tensor::xavier_uniform({d_model, d_head}, d_model, d_head, rng));
    p.wk.push_back(Tensor::xavier_uniform({d_model, d_head}, d_model, d_head, rng));
    p.wv.push_back(Tensor::xavier_uniform({d_model, d_head}, d_model, d_head, rng));
  }
  p.wo = Tensor::xavier_uniform({d_model, d_model}, d_model, d_model, rng);
  return p;
}

void MultiHeadParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t h = 0; h < wq.size(); ++h) {
    const std::string head = prefix + ".head" + std::to_string(h);
    fn(head + ".wq", wq[h]);
    fn(head + ".wk", wk[h]);
    fn(head + ".wv", wv[h]);
  }
  fn(prefix + ".wo", wo);
}

FfnParams FfnParams::make(std::size_t d_model, std::size_t d_ff, Rng& rng) {
  if (d_ff == 0) throw ConfigError("ffn: inner width must be positive");
  FfnParams p;
  p.w1 = Tensor::xavier_uniform({d_model, d_ff}, d_model, d_ff, rng);
  p.b1 = Tensor::zeros({d_ff}, true);
  p.w2 = Tensor::xavier_uniform({d_ff, d_model}, d_ff, d_model, rng);
  p.b2 = Tensor::zeros({d_model}, true);
  return p;
}

void FfnParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
}

EncoderParams EncoderParams::make(std::size_t d_model, std::size_t heads,
                                  std::size_t d_ff, double dropout, Rng& rng) {
  EncoderParams p;
  p.mha = MultiHeadParams::make(d_model, heads, rng);
  p.ff = FfnParams::make(d_model, d_ff, rng);
  p.ln1_gain = Tensor::full({d_model}, 1.0, true);
  p.ln1_bias = Tensor::zeros({d_model}, true);
  p.ln2_gain = Tensor::full({d_model}, 1.0, true);
  p.ln2_bias = Tensor::zeros({d_model}, true);
  p.dropout_rate = dropout;
  return p;
}

void EncoderParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  mha.visit(prefix + ".mha", fn);
  ff.visit(prefix + ".ffn", fn);
  fn(prefix + ".ln1.gain", ln1_gain);
  fn(prefix + ".ln1.bias", ln1_bias);
  fn(prefix + ".ln2.gain", ln2_gain);
  fn(prefix + ".ln2.bias", ln2_bias);
}

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw ShapeError("scaled_attention: rank-2 operands required");
  }
  if (q.shape()[1] != k.shape()[1]) {
    throw ShapeError("scaled_attention: d_k mismatch, Q " +
                     shape_str(q.shape()) + " vs K " + shape_str(k.shape()));
  }
  if (k.shape()[0] != v.shape()[0]) {
    throw ShapeError("scaled_attention: K rows " + shape_str(k.shape()) +
                     " vs V rows " + shape_str(v.shape()));
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
  return matmul(softmax(scores), v);
}

Tensor multi_head(const Tensor& x, const MultiHeadParams& p) {
  if (x.rank() != 2 || x.shape()[1] != p.d_model()) {
    throw ShapeError("multi_head: input " + shape_str(x.shape()) +
                     " does not match d_model " +
                     std::to_string(p.d_model()));
  }
  Tensor heads;
  for (std::size_t h = 0; h < p.heads(); ++h) {
    Tensor head = scaled_attention(matmul(x, p.wq[h]), matmul(x, p.wk[h]),
                                   matmul(x, p.wv[h]));
    heads = h == 0 ? head : concat_cols(heads, head);
  }
  return matmul(heads, p.wo);
}

Tensor ffn(const Tensor& x, const FfnParams& p) {
  Tensor hidden = gelu(add_bias(matmul(x, p.w1), p.b1));
  return add_bias(matmul(hidden, p.w2), p.b2);
}

Tensor encoder_block_postnorm(const Tensor& x, const EncoderParams& p,
                              Mode mode, Rng& rng) {
  Tensor attended = dropout(multi_head(x, p.mha), p.dropout_rate, mode, rng);
  Tensor h = layer_norm(add(x, attended), p.ln1_gain, p.ln1_bias);
  Tensor fed = dropout(ffn(h, p.ff), p.dropout_rate, mode, rng);
  return layer_norm(add(h, fed), p.ln2_gain, p.ln2_bias);
}

Tensor encoder_block_prenorm(const Tensor& x, const EncoderParams& p) {
  Tensor zp = add(multi_head(layer_norm(x, p.ln1_gain, p.ln1_bias), p.mha), x);
  return add(ffn(layer_norm(zp, p.ln2_gain, p.ln2_bias), p.ff), zp);
}

}  // namespace agrifuse
