#include "pcan/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace pcan::transformer {

using namespace pcan::nn;

namespace {

constexpr double kTwoPi = 6.283185307179586;

}  // namespace

Tensor positional_encoding_2d(int h, int w, int c) {
  if (c % 4 != 0) throw std::invalid_argument("positional_encoding_2d: c must be divisible by 4");
  Tensor pe({h * w, c});
  const int half = c / 2;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int row = y * w + x;
      const double ye = (y + 0.5) / h * kTwoPi;
      const double xe = (x + 0.5) / w * kTwoPi;
      for (int j = 0; j < half / 2; ++j) {
        const double freq = std::pow(10000.0, -2.0 * j / double(half));
        pe.at(row, 2 * j) = std::sin(ye * freq);
        pe.at(row, 2 * j + 1) = std::cos(ye * freq);
        pe.at(row, half + 2 * j) = std::sin(xe * freq);
        pe.at(row, half + 2 * j + 1) = std::cos(xe * freq);
      }
    }
  return pe;
}

Var sine_embed_boxes(const Var& boxes, int c) {
  if (c % 8 != 0) throw std::invalid_argument("sine_embed_boxes: c must be divisible by 8");
  if (boxes.value().ndim() != 2 || boxes.value().cols() != 4)
    throw std::invalid_argument("sine_embed_boxes: expects [N,4]");
  const int per = c / 8;
  Tensor freqs({1, per});
  for (int j = 0; j < per; ++j) freqs[j] = std::pow(10000.0, -double(j) / double(per));
  const Var fr = constant(std::move(freqs));
  std::vector<Var> feats;
  for (int k = 0; k < 4; ++k) {
    const Var proj = matmul(scale(slice_cols(boxes, k, k + 1), kTwoPi), fr);
    feats.push_back(vsin(proj));
    feats.push_back(vcos(proj));
  }
  return concat_cols(feats);
}

TransformerEncoder::TransformerEncoder(ParamStore& ps, const TransformerConfig& cfg, pcan::Rng& rng)
    : cfg_(cfg) {
  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string base = "encoder.layer" + std::to_string(i);
    Layer l;
    l.ln1 = LayerNorm(ps, base + ".ln1", cfg.channels);
    l.ln2 = LayerNorm(ps, base + ".ln2", cfg.channels);
    l.attn = MultiheadAttention(ps, base + ".attn", cfg.channels, cfg.heads, rng);
    l.ffn1 = Linear(ps, base + ".ffn1", cfg.channels, cfg.channels * cfg.ffn_mult, rng);
    l.ffn2 = Linear(ps, base + ".ffn2", cfg.channels * cfg.ffn_mult, cfg.channels, rng);
    layers_.push_back(std::move(l));
  }
}

MemoryFeatures TransformerEncoder::forward(const encoders::VisualPyramid& pyr) const {
  if (pyr.channels != cfg_.channels)
    throw std::invalid_argument("TransformerEncoder: channel dim mismatch");
  std::vector<Var> rows, pos;
  MemoryFeatures mem;
  mem.channels = cfg_.channels;
  for (const auto& lvl : pyr.levels) {
    rows.push_back(lvl.rows);
    pos.push_back(constant(positional_encoding_2d(lvl.height, lvl.width, cfg_.channels)));
    mem.level_dims.push_back({lvl.height, lvl.width});
  }
  mem.pos = concat_rows(pos);
  Var x = add(concat_rows(rows), mem.pos);
  for (const auto& l : layers_) {
    const Var t = l.ln1(x);
    x = add(x, l.attn(t, t, t));
    x = add(x, l.ffn2(relu(l.ffn1(l.ln2(x)))));
  }
  mem.rows = x;
  return mem;
}

TransformerDecoder::TransformerDecoder(ParamStore& ps, const TransformerConfig& cfg, pcan::Rng& rng)
    : cfg_(cfg) {
  for (int i = 0; i < cfg.dec_layers; ++i) {
    const std::string base = "decoder.layer" + std::to_string(i);
    Layer l;
    l.ln1 = LayerNorm(ps, base + ".ln1", cfg.channels);
    l.ln2 = LayerNorm(ps, base + ".ln2", cfg.channels);
    l.ln3 = LayerNorm(ps, base + ".ln3", cfg.channels);
    l.self_attn = MultiheadAttention(ps, base + ".self_attn", cfg.channels, cfg.heads, rng);
    l.cross_attn = MultiheadAttention(ps, base + ".cross_attn", cfg.channels, cfg.heads, rng);
    l.ffn1 = Linear(ps, base + ".ffn1", cfg.channels, cfg.channels * cfg.ffn_mult, rng);
    l.ffn2 = Linear(ps, base + ".ffn2", cfg.channels * cfg.ffn_mult, cfg.channels, rng);
    layers_.push_back(std::move(l));
  }
  anchor_mlp_ = Mlp(ps, "decoder.anchor_mlp", {cfg.channels, cfg.channels, cfg.channels}, rng);
  refine_mlp_ = Mlp(ps, "decoder.refine_mlp", {cfg.channels, cfg.channels, 4}, rng,
                    /*zero_init_last=*/true);
  ln_out_ = LayerNorm(ps, "decoder.ln_out", cfg.channels);
}

DecoderOutput TransformerDecoder::forward(const MemoryFeatures& mem, const QueryBundle& bundle,
                                          bool refine_anchors) const {
  if (mem.channels != cfg_.channels || bundle.content.value().cols() != cfg_.channels)
    throw std::invalid_argument("TransformerDecoder: channel dim mismatch");
  DecoderOutput out;
  Var x = bundle.content;
  Var anchors = bundle.anchors;
  out.anchor_trajectory.push_back(anchors.value());
  const Var mem_keys = add(mem.rows, mem.pos);
  for (const auto& l : layers_) {
    const Var pos_q = anchor_mlp_(sine_embed_boxes(anchors, cfg_.channels));
    const Var t1 = l.ln1(x);
    const Var qk = add(t1, pos_q);
    x = add(x, l.self_attn(qk, qk, t1));
    const Var t2 = l.ln2(x);
    x = add(x, l.cross_attn(add(t2, pos_q), mem_keys, mem.rows));
    x = add(x, l.ffn2(relu(l.ffn1(l.ln3(x)))));
    if (refine_anchors) {
      anchors = sigmoid(add(logit(anchors), refine_mlp_(ln_out_(x))));
      out.anchor_trajectory.push_back(anchors.value());
    }
  }
  out.queries = ln_out_(x);
  out.anchors = anchors;
  return out;
}

QueryBuilder::QueryBuilder(ParamStore& ps, int queries, pcan::Rng& rng) : queries_(queries) {
  // Uniform in inverse-sigmoid space keeps the initial anchors spread over
  // the unit square without saturating the refinement updates.
  Tensor init({queries, 4});
  for (int64_t i = 0; i < init.size(); ++i) init[i] = rng.uniform(-2.0, 2.0);
  anchor_logits_ = ps.add("queries.anchor_logits", std::move(init));
}

QueryBundle QueryBuilder::matching_bundle(const Var& sentence) const {
  QueryBundle b;
  b.content = repeat_row(sentence, queries_);
  b.anchors = sigmoid(anchor_logits_);
  b.origin = QueryBundle::Origin::kMatching;
  b.real_rows = queries_;
  return b;
}

std::vector<QueryBundle> QueryBuilder::contrastive_bundles(
    const Var& sentence, const pam::ContrastiveGroupSet& groups) const {
  std::vector<QueryBundle> out;
  const Var learned = sigmoid(anchor_logits_);
  for (size_t g = 0; g < groups.groups.size(); ++g) {
    const auto& group = groups.groups[g];
    const int k = int(group.size());
    if (k > queries_)
      throw std::invalid_argument("contrastive_bundles: group size exceeds query count");
    Tensor rows({k, 4});
    for (int i = 0; i < k; ++i) {
      const auto cs = group[size_t(i)].box.to_center_size().raw();
      for (int j = 0; j < 4; ++j) rows.at(i, j) = cs[size_t(j)];
    }
    QueryBundle b;
    b.content = repeat_row(sentence, queries_);
    b.anchors = k == queries_
                    ? constant(std::move(rows))
                    : concat_rows({constant(std::move(rows)), slice_rows(learned, k, queries_)});
    b.origin = QueryBundle::Origin::kContrastive;
    b.group = int(g);
    b.real_rows = k;
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace pcan::transformer
