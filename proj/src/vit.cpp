// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/vit.hpp"

#include <cmath>

#include "agrifuse/errors.hpp"

namespace agrifuse {

void ViTConfig::validate() const {
  if (channels == 0 || image_side == 0 || patch == 0 || dim == 0 ||
      layers == 0 || heads == 0 || d_ff == 0 || out_side == 0) {
    throw ConfigError("vit: all dimensions must be positive");
  }
  if (image_side % patch != 0) {
    throw ConfigError("vit: patch " + std::to_string(patch) +
                      " does not tile image side " +
                      std::to_string(image_side));
  }
  if (dim % heads != 0) {
    throw ConfigError("vit: dim must split evenly across heads");
  }
}

ViTParams ViTParams::make(const ViTConfig& config, Rng& rng) {
  config.validate();
  ViTParams p;
  p.config = config;
  p.patch_proj = Tensor::xavier_uniform({config.patch_dim(), config.dim},
                                        config.patch_dim(), config.dim, rng);
  p.class_token =
      Tensor::xavier_uniform({1, config.dim}, config.dim, config.dim, rng);
  p.pos_table = Tensor::xavier_uniform({config.tokens(), config.dim},
                                       config.dim, config.dim, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    p.blocks.push_back(EncoderParams::make(config.dim, config.heads,
                                           config.d_ff, 0.0, rng));
  }
  p.final_ln_gain = Tensor::full({config.dim}, 1.0, true);
  p.final_ln_bias = Tensor::zeros({config.dim}, true);
  const std::size_t out = config.out_side * config.out_side;
  p.head_w = Tensor::xavier_uniform({config.dim, out}, config.dim, out, rng);
  p.head_b = Tensor::zeros({out}, true);
  return p;
}

void ViTParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".patch_proj", patch_proj);
  fn(prefix + ".class_token", class_token);
  fn(prefix + ".pos_table", pos_table);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].visit(prefix + ".block" + std::to_string(l), fn);
  }
  fn(prefix + ".final_ln.gain", final_ln_gain);
  fn(prefix + ".final_ln.bias", final_ln_bias);
  fn(prefix + ".head.w", head_w);
  fn(prefix + ".head.b", head_b);
}

Tensor patchify_embed(const Tensor& image, const ViTParams& p) {
  const ViTConfig& c = p.config;
  const Shape expected = {c.channels, c.image_side, c.image_side};
  if (image.shape() != expected) {
    throw ShapeError("vit: image " + shape_str(image.shape()) +
                     ", expected " + shape_str(expected));
  }
  Tensor patches = extract_patches(clamp01(image), c.patch);
  Tensor projected = matmul(patches, p.patch_proj);
  Tensor sequence = concat_rows(p.class_token, projected);
  return add(sequence, p.pos_table);
}

Tensor vit_forward(const Tensor& image, const ViTParams& p, Mode /*mode*/) {
  Tensor z = patchify_embed(image, p);
  for (const auto& block : p.blocks) z = encoder_block_prenorm(z, block);
  Tensor cls = slice_rows(z, 0, 1);
  Tensor y = layer_norm(cls, p.final_ln_gain, p.final_ln_bias);
  Tensor out = add_bias(matmul(y, p.head_w), p.head_b);
  return reshape(out, {p.config.out_side, p.config.out_side});
}

Tensor vit_attention_map(const Tensor& image, const ViTParams& p) {
  NoGradGuard guard;
  const ViTConfig& c = p.config;
  Tensor z = patchify_embed(image, p);
  for (std::size_t l = 0; l + 1 < p.blocks.size(); ++l) {
    z = encoder_block_prenorm(z, p.blocks[l]);
  }
  // class-row attention weights inside the final block's attention sublayer
  const EncoderParams& last = p.blocks.back();
  Tensor normed = layer_norm(z, last.ln1_gain, last.ln1_bias);
  const std::size_t n_patch = c.patch_count();
  Eigen::ArrayXd accum = Eigen::ArrayXd::Zero(n_patch);
  for (std::size_t h = 0; h < last.mha.heads(); ++h) {
    Tensor q = matmul(slice_rows(normed, 0, 1), last.mha.wq[h]);
    Tensor k = matmul(normed, last.mha.wk[h]);
    const double inv_sqrt_dk =
        1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
    Tensor probs = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dk));
    for (std::size_t i = 0; i < n_patch; ++i) {
      accum[i] += probs.at({0, i + 1});  // skip the class-to-class entry
    }
  }
  accum /= accum.sum();
  std::vector<double> values(accum.data(), accum.data() + n_patch);
  return Tensor::from_vector({c.grid_side(), c.grid_side()},
                             std::move(values));
}

}  // namespace agrifuse
