#include "pcan/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace pcan::encoders {

using namespace pcan::nn;

namespace {

Tensor conv_init(int out_c, int in_c, int k, pcan::Rng& rng) {
  const int fan_in = in_c * k * k, fan_out = out_c * k * k;
  return xavier_uniform({out_c, in_c, k, k}, fan_in, fan_out, rng);
}

// Fixed 1-D sinusoidal positions for token sequences.
Tensor positional_1d(int l, int c) {
  Tensor pe({l, c});
  for (int p = 0; p < l; ++p)
    for (int j = 0; j < c; ++j) {
      const double freq = std::pow(10000.0, -2.0 * double(j / 2) / double(c));
      pe.at(p, j) = (j % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  return pe;
}

}  // namespace

VisualEncoder::VisualEncoder(ParamStore& ps, const EncoderConfig& cfg, pcan::Rng& rng) : cfg_(cfg) {
  const int c = cfg.channels;
  const int widths[6] = {3, std::max(4, c / 4), std::max(8, c / 2), c, c, c};
  for (int i = 0; i < 5; ++i) {
    convs_[i].w = ps.add("visual.conv" + std::to_string(i) + ".w",
                         conv_init(widths[i + 1], widths[i], 3, rng));
    convs_[i].b = ps.add("visual.conv" + std::to_string(i) + ".b", Tensor({widths[i + 1]}));
  }
  for (int i = 0; i < 3; ++i)
    proj_[i] = Linear(ps, "visual.proj" + std::to_string(i), widths[i + 3], c, rng);
}

VisualPyramid VisualEncoder::forward(const std::vector<float>& image, int h, int w) const {
  if (int64_t(image.size()) != int64_t(h) * w * 3)
    throw std::invalid_argument("VisualEncoder: image size mismatch");
  Tensor chw({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        chw[(int64_t(c) * h + y) * w + x] = double(image[(size_t(y) * w + x) * 3 + c]);
  return forward(constant(std::move(chw)));
}

VisualPyramid VisualEncoder::forward(const Var& image_chw) const {
  const int h = image_chw.value().dim(1), w = image_chw.value().dim(2);
  if (h % 32 != 0 || w % 32 != 0)
    throw std::invalid_argument("VisualEncoder: image height/width must be divisible by 32");
  Var x = image_chw;
  std::vector<Var> taps;
  for (int i = 0; i < 5; ++i) {
    x = relu(conv2d(x, convs_[i].w, convs_[i].b, 2, 1));
    if (i >= 2) taps.push_back(x);  // strides 8, 16, 32
  }
  VisualPyramid pyr;
  pyr.channels = cfg_.channels;
  for (int i = 0; i < 3; ++i) {
    PyramidLevel lvl;
    lvl.height = taps[size_t(i)].value().dim(1);
    lvl.width = taps[size_t(i)].value().dim(2);
    lvl.rows = proj_[i](chw_to_rows(taps[size_t(i)]));
    pyr.levels.push_back(std::move(lvl));
  }
  return pyr;
}

TextEncoder::TextEncoder(ParamStore& ps, const EncoderConfig& cfg, pcan::Rng& rng) : cfg_(cfg) {
  const int c = cfg.channels;
  table_ = ps.add("text.embed", xavier_uniform({cfg.vocab, c}, cfg.vocab, c, rng));
  attn_ = MultiheadAttention(ps, "text.attn", c, cfg.heads, rng);
  ln1_ = LayerNorm(ps, "text.ln1", c);
  ln2_ = LayerNorm(ps, "text.ln2", c);
  ln_out_ = LayerNorm(ps, "text.ln_out", c);
  ffn1_ = Linear(ps, "text.ffn1", c, c * cfg.ffn_mult, rng);
  ffn2_ = Linear(ps, "text.ffn2", c * cfg.ffn_mult, c, rng);
}

Var TextEncoder::embed(const std::vector<int>& token_ids) const {
  if (token_ids.empty() || int(token_ids.size()) > cfg_.max_tokens)
    throw std::invalid_argument("TextEncoder: token count out of [1, max_tokens]");
  for (int id : token_ids)
    if (id < 0 || id >= cfg_.vocab)
      throw std::invalid_argument("TextEncoder: token id out of vocabulary");
  return embedding(table_, token_ids);
}

TextFeatures TextEncoder::forward(const std::vector<int>& token_ids) const {
  const int l = int(token_ids.size());
  Var x = add(embed(token_ids), constant(positional_1d(l, cfg_.channels)));
  const Var t1 = ln1_(x);
  x = add(x, attn_(t1, t1, t1));
  x = add(x, ffn2_(relu(ffn1_(ln2_(x)))));
  TextFeatures out;
  out.words = ln_out_(x);
  if (cfg_.max_pool) {
    Var m = slice_rows(out.words, 0, 1);
    for (int i = 1; i < l; ++i) m = maxe(m, slice_rows(out.words, i, i + 1));
    out.sentence = m;
  } else {
    Tensor ones({1, l}, 1.0 / double(l));
    out.sentence = matmul(constant(std::move(ones)), out.words);
  }
  return out;
}

LanguageGate::LanguageGate(ParamStore& ps, int channels, pcan::Rng& rng)
    : gate_(ps, "gate.linear", channels, channels, rng) {}

VisualPyramid LanguageGate::apply(const VisualPyramid& pyr, const Var& sentence) const {
  const Var g = sigmoid(gate_(sentence));  // [1, C]
  VisualPyramid out;
  out.channels = pyr.channels;
  for (const auto& lvl : pyr.levels) {
    PyramidLevel o;
    o.height = lvl.height;
    o.width = lvl.width;
    o.rows = mul_rows(lvl.rows, g);
    out.levels.push_back(std::move(o));
  }
  return out;
}

}  // namespace pcan::encoders
