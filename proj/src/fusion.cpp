// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/fusion.hpp"

#include <cmath>

#include "agrifuse/errors.hpp"

namespace agrifuse {

void FusionConfig::validate() const {
  if (in_rows == 0 || in_cols == 0 || tokens == 0 || d_model == 0 ||
      layers == 0 || heads == 0 || d_ff == 0) {
    throw ConfigError("fusion encoder: all dimensions must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("fusion encoder: d_model must split across heads");
  }
}

FusionParams FusionParams::make(const FusionConfig& config, Rng& rng) {
  config.validate();
  FusionParams p;
  p.config = config;
  p.expand_w = Tensor::xavier_uniform({config.flat_in(), config.expanded()},
                                      config.flat_in(), config.expanded(),
                                      rng);
  p.expand_b = Tensor::zeros({config.expanded()}, true);
  for (std::size_t l = 0; l < config.layers; ++l) {
    p.blocks.push_back(EncoderParams::make(config.d_model, config.heads,
                                           config.d_ff, config.dropout, rng));
  }
  p.head_w = Tensor::xavier_uniform({config.expanded(), 2}, config.expanded(),
                                    2, rng);
  p.head_b = Tensor::zeros({2}, true);
  return p;
}

void FusionParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".expand.w", expand_w);
  fn(prefix + ".expand.b", expand_b);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].visit(prefix + ".block" + std::to_string(l), fn);
  }
  fn(prefix + ".head.w", head_w);
  fn(prefix + ".head.b", head_b);
}

Tensor fuse(const Tensor& weather_embedding, const Tensor& visual_embedding) {
  if (weather_embedding.rank() != 2 || visual_embedding.rank() != 2 ||
      weather_embedding.shape() != visual_embedding.shape()) {
    throw ShapeError("fuse: embeddings must share a square shape, got " +
                     shape_str(weather_embedding.shape()) + " and " +
                     shape_str(visual_embedding.shape()));
  }
  return concat_rows(weather_embedding, visual_embedding);
}

Tensor fusion_forward(const Tensor& fused, const FusionParams& p, Mode mode,
                      Rng& rng) {
  const FusionConfig& c = p.config;
  if (fused.shape() != Shape{c.in_rows, c.in_cols}) {
    throw ShapeError("fusion: input " + shape_str(fused.shape()) +
                     ", expected (" + std::to_string(c.in_rows) + "," +
                     std::to_string(c.in_cols) + ")");
  }
  Tensor flat = reshape(fused, {1, c.flat_in()});
  Tensor expanded =
      add_bias(matmul(dropout(flat, c.dropout, mode, rng), p.expand_w),
               p.expand_b);
  Tensor a = reshape(expanded, {c.tokens, c.d_model});
  for (const auto& block : p.blocks) {
    a = encoder_block_postnorm(a, block, mode, rng);
  }
  Tensor pooled = reshape(dropout(a, c.dropout, mode, rng), {1, c.expanded()});
  Tensor logits = add_bias(matmul(pooled, p.head_w), p.head_b);
  return reshape(logits, {2});
}

Classification classify(const Tensor& logits) {
  if (logits.shape() != Shape{2}) {
    throw ShapeError("classify: two logits required, got " +
                     shape_str(logits.shape()));
  }
  const double neg = logits.values()[0];
  const double pos = logits.values()[1];
  if (!std::isfinite(neg) || !std::isfinite(pos)) {
    throw InputError("classify: non-finite logits");
  }
  Classification result;
  // p_positive = sigmoid(pos - neg), the softmax of two logits
  result.p_positive = 1.0 / (1.0 + std::exp(neg - pos));
  result.label = pos > neg ? 1 : 0;
  return result;
}

}  // namespace agrifuse
