#pragma once

#include <utility>
#include <vector>

#include "pcan/encoders.hpp"
#include "pcan/nn.hpp"
#include "pcan/pam.hpp"

namespace pcan::transformer {

using nn::ParamStore;
using nn::Tensor;
using nn::Var;

struct TransformerConfig {
  int channels = 32;
  int heads = 4;
  int enc_layers = 4;
  int dec_layers = 4;
  int ffn_mult = 4;
  int queries = 12;  // N content/position queries
};

/// Fixed 2-D sinusoidal encoding for one pyramid level, [h*w, c].
Tensor positional_encoding_2d(int h, int w, int c);

/// Sinusoidal embedding of 4-D anchor boxes, [N,4] -> [N,c]; differentiable
/// in the anchors. Requires c % 8 == 0.
Var sine_embed_boxes(const Var& boxes, int c);

// Flattened multi-level memory produced by the encoder. `pos` is the
// constant positional encoding matching `rows` row for row.
struct MemoryFeatures {
  Var rows;  // [F, C], F = sum of H_i*W_i
  Var pos;   // [F, C]
  std::vector<std::pair<int, int>> level_dims;
  int channels = 0;
};

// Content/position query pair entering the decoder. The first `real_rows`
// anchors of a contrastive bundle come from PAM groups; remaining rows copy
// the learnable matching anchors.
struct QueryBundle {
  enum class Origin { kMatching, kContrastive };
  Var content;  // [N, C]
  Var anchors;  // [N, 4] center-size-normalized
  Origin origin = Origin::kMatching;
  int group = -1;
  int real_rows = 0;
};

struct DecoderOutput {
  Var queries;  // [N, C]
  Var anchors;  // [N, 4] final refined positions
  std::vector<Tensor> anchor_trajectory;  // per-layer anchor values, input first
};

// Pre-norm self-attention stack over flattened pyramid rows plus positional
// encoding.
class TransformerEncoder {
 public:
  TransformerEncoder(ParamStore& ps, const TransformerConfig& cfg, pcan::Rng& rng);

  MemoryFeatures forward(const encoders::VisualPyramid& pyr) const;

 private:
  struct Layer {
    nn::LayerNorm ln1, ln2;
    nn::MultiheadAttention attn;
    nn::Linear ffn1, ffn2;
  };
  std::vector<Layer> layers_;
  TransformerConfig cfg_;
};

// Query decoder with 4-D anchors: per layer, self-attention, anchor-
// conditioned cross-attention and an additive box refinement in
// inverse-sigmoid space. Both the matching and the contrastive part run
// through this same parameter set.
class TransformerDecoder {
 public:
  TransformerDecoder(ParamStore& ps, const TransformerConfig& cfg, pcan::Rng& rng);

  DecoderOutput forward(const MemoryFeatures& mem, const QueryBundle& bundle,
                        bool refine_anchors = true) const;

 private:
  struct Layer {
    nn::LayerNorm ln1, ln2, ln3;
    nn::MultiheadAttention self_attn, cross_attn;
    nn::Linear ffn1, ffn2;
  };
  std::vector<Layer> layers_;
  nn::Mlp anchor_mlp_;  // sine(anchor) -> query position embedding
  nn::Mlp refine_mlp_;  // query -> anchor delta (zero-initialized last layer)
  nn::LayerNorm ln_out_;
  TransformerConfig cfg_;
};

// Builds the two kinds of query bundles. Owns the learnable position
// queries of the matching part (stored in inverse-sigmoid space).
class QueryBuilder {
 public:
  QueryBuilder(ParamStore& ps, int queries, pcan::Rng& rng);

  int queries() const { return queries_; }

  QueryBundle matching_bundle(const Var& sentence) const;

  /// One bundle per PAM group; group boxes fill the first rows of the
  /// anchors, the rest copy the learnable ones. Throws if a group is larger
  /// than N.
  std::vector<QueryBundle> contrastive_bundles(const Var& sentence,
                                               const pam::ContrastiveGroupSet& groups) const;

 private:
  Var anchor_logits_;  // [N, 4]
  int queries_;
};

}  // namespace pcan::transformer
