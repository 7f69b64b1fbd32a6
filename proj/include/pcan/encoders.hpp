#pragma once

#include <vector>

#include "pcan/nn.hpp"
#include "pcan/rng.hpp"

namespace pcan::encoders {

using nn::ParamStore;
using nn::Var;

struct EncoderConfig {
  int channels = 32;  // shared channel dim C (256 mirrors the full-scale setting)
  int heads = 4;
  int ffn_mult = 4;
  int vocab = 19;
  int max_tokens = 16;
  bool max_pool = false;      // sentence pooling: mean by default
  bool language_gate = true;  // language-conditioned channel gating
};

// Multi-scale features as token rows. Level i holds a [H_i*W_i, C] matrix;
// strides are 8/16/32 relative to the input image.
struct PyramidLevel {
  Var rows;
  int height = 0;
  int width = 0;
};

struct VisualPyramid {
  std::vector<PyramidLevel> levels;
  int channels = 0;
};

struct TextFeatures {
  Var words;     // [L, C]
  Var sentence;  // [1, C], pooled over words
};

// Small strided conv stack standing in for a pretrained backbone; emits three
// levels projected to a common channel dim.
class VisualEncoder {
 public:
  VisualEncoder(ParamStore& ps, const EncoderConfig& cfg, pcan::Rng& rng);

  /// image is row-major [y][x][3] in [0,1]; H and W must be divisible by 32.
  VisualPyramid forward(const std::vector<float>& image, int h, int w) const;

  /// Same, from a [3,H,W] variable (gradient-check entry point).
  VisualPyramid forward(const Var& image_chw) const;

 private:
  struct Conv {
    Var w, b;
  };
  Conv convs_[5];
  nn::Linear proj_[3];
  EncoderConfig cfg_;
};

// Token embedding + one self-attention block + pooling.
class TextEncoder {
 public:
  TextEncoder(ParamStore& ps, const EncoderConfig& cfg, pcan::Rng& rng);

  /// Raw embedding lookup before positional encoding ([L, C]).
  Var embed(const std::vector<int>& token_ids) const;

  TextFeatures forward(const std::vector<int>& token_ids) const;

 private:
  Var table_;
  nn::MultiheadAttention attn_;
  nn::LayerNorm ln1_, ln2_, ln_out_;
  nn::Linear ffn1_, ffn2_;
  EncoderConfig cfg_;
};

// Channel-wise sigmoid gate driven by the sentence feature.
class LanguageGate {
 public:
  LanguageGate(ParamStore& ps, int channels, pcan::Rng& rng);

  VisualPyramid apply(const VisualPyramid& pyr, const Var& sentence) const;

 private:
  nn::Linear gate_;
};

}  // namespace pcan::encoders
