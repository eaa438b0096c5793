// SPDX-License-Identifier: Apache-2.0
//
// Vision transformer over RGB-coded vegetation-index stacks. Patch tokens
// plus a class token run through pre-norm encoder blocks; the normalized
// class representation maps through an affine head to a square embedding.

#ifndef AGRIFUSE_VIT_HPP
#define AGRIFUSE_VIT_HPP

#include <vector>

#include "agrifuse/transformer.hpp"

namespace agrifuse {

struct ViTConfig {
  std::size_t channels = 9;
  std::size_t image_side = 224;
  std::size_t patch = 16;
  std::size_t dim = 768;
  std::size_t layers = 12;
  std::size_t heads = 8;
  std::size_t d_ff = 3072;
  std::size_t out_side = 14;  // embedding is (out_side, out_side)

  std::size_t grid_side() const { return image_side / patch; }
  std::size_t patch_count() const { return grid_side() * grid_side(); }
  std::size_t tokens() const { return patch_count() + 1; }
  std::size_t patch_dim() const { return patch * patch * channels; }

  void validate() const;
};

struct ViTParams {
  ViTConfig config;
  Tensor patch_proj;   // [P*P*C, D]
  Tensor class_token;  // [1, D]
  Tensor pos_table;    // [N+1, D]
  std::vector<EncoderParams> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head_w;  // [D, out_side^2]
  Tensor head_b;  // [out_side^2]

  static ViTParams make(const ViTConfig& config, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Token sequence [N+1, D]: row 0 is class token + positional row 0, rows
/// 1..N are projected patches (row-major patch scan) plus their positional
/// rows. Pixel values are clamped to [0,1] before projection.
Tensor patchify_embed(const Tensor& image, const ViTParams& p);

/// Full forward pass to the (out_side, out_side) visual embedding.
Tensor vit_forward(const Tensor& image, const ViTParams& p, Mode mode);

/// Class-token attention of the final block, averaged over heads, class
/// self-attention entry dropped and the rest renormalized to sum 1;
/// reshaped to the patch grid (grid_side x grid_side). Values only.
Tensor vit_attention_map(const Tensor& image, const ViTParams& p);

}  // namespace agrifuse

#endif  // AGRIFUSE_VIT_HPP
