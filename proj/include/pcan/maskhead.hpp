#pragma once

#include <vector>

#include "pcan/nn.hpp"
#include "pcan/transformer.hpp"

namespace pcan::maskhead {

using nn::ParamStore;
using nn::Var;

struct MaskHeadConfig {
  int channels = 32;       // decoder/encoder channel dim C
  int mask_channels = 8;   // C_mask of the fused map
  int embed_dim = 64;      // D of the contrastive output embeddings
  bool normalize_embeddings = true;
};

// Stride-8 fused feature map, [C_mask, H/8, W/8].
struct FusedMap {
  Var chw;
  int height = 0;
  int width = 0;
};

// Per-query predictions: boxes in center-size-normalized form, one
// referent-ness logit each, L2-normalized output embeddings and stride-8
// mask logits (row n is query n's flattened map).
struct PredictionSet {
  Var boxes;         // [N, 4]
  Var class_logits;  // [N, 1]
  Var embeddings;    // [N, D]
  Var mask_logits;   // [N, mask_h * mask_w]
  int mask_h = 0;
  int mask_w = 0;
};

class MaskHead {
 public:
  MaskHead(ParamStore& ps, const MaskHeadConfig& cfg, pcan::Rng& rng);

  /// Top-down sum of the memory levels (nearest x2 upsampling) followed by a
  /// 1x1 projection to mask_channels.
  FusedMap fuse_fpn(const transformer::MemoryFeatures& mem) const;

  /// Convolves the fused map with the 3x3 kernel generated from one query's
  /// parameter row (3*3*C_mask weights plus one bias). Returns [1, h*w].
  Var dynamic_mask(const Var& kernel_params_row, const FusedMap& fused) const;

  /// Box, class, embedding and mask heads over all queries.
  PredictionSet predict(const transformer::DecoderOutput& dec, const FusedMap& fused) const;

  /// Embedding head alone (used for contrastive groups).
  Var embed(const Var& queries) const;

  int kernel_params_per_query() const { return 3 * 3 * cfg_.mask_channels + 1; }

 private:
  MaskHeadConfig cfg_;
  nn::Linear fuse_proj_;   // C -> C_mask
  nn::Mlp box_mlp_;        // C -> C -> C -> 4, added to anchors in logit space
  nn::Linear class_head_;  // C -> 1
  nn::Linear embed_head_;  // C -> D
  nn::Mlp kernel_mlp_;     // C -> C -> (3*3*C_mask + 1)
};

}  // namespace pcan::maskhead
