#include "pcan/model.hpp"

#include <cmath>
#include <stdexcept>

namespace pcan::model {

using namespace pcan::nn;

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (channels % 8 != 0) bad("channels must be divisible by 8 (sine embeddings)");
  if (channels % heads != 0) bad("channels must be divisible by heads");
  if (queries < 1) bad("queries >= 1");
  if (enc_layers < 1 || dec_layers < 1) bad("layer counts >= 1");
  if (embed_dim < 1 || mask_channels < 1) bad("embed_dim and mask_channels >= 1");
}

PcanModel::PcanModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  pcan::Rng rng(cfg.init_seed);
  encoders::EncoderConfig ec;
  ec.channels = cfg.channels;
  ec.heads = cfg.heads;
  ec.ffn_mult = cfg.ffn_mult;
  ec.vocab = cfg.vocab;
  ec.max_tokens = cfg.max_tokens;
  ec.max_pool = cfg.max_pool;
  ec.language_gate = cfg.language_gate;
  transformer::TransformerConfig tc;
  tc.channels = cfg.channels;
  tc.heads = cfg.heads;
  tc.enc_layers = cfg.enc_layers;
  tc.dec_layers = cfg.dec_layers;
  tc.ffn_mult = cfg.ffn_mult;
  tc.queries = cfg.queries;
  maskhead::MaskHeadConfig mc;
  mc.channels = cfg.channels;
  mc.mask_channels = cfg.mask_channels;
  mc.embed_dim = cfg.embed_dim;
  mc.normalize_embeddings = cfg.normalize_embeddings;

  visual_ = std::make_unique<encoders::VisualEncoder>(params_, ec, rng);
  text_ = std::make_unique<encoders::TextEncoder>(params_, ec, rng);
  gate_ = std::make_unique<encoders::LanguageGate>(params_, cfg.channels, rng);
  encoder_ = std::make_unique<transformer::TransformerEncoder>(params_, tc, rng);
  decoder_ = std::make_unique<transformer::TransformerDecoder>(params_, tc, rng);
  query_builder_ = std::make_unique<transformer::QueryBuilder>(params_, cfg.queries, rng);
  mask_head_ = std::make_unique<maskhead::MaskHead>(params_, mc, rng);
}

PcanModel::SceneForward PcanModel::trunk(const std::vector<float>& image, int h, int w,
                                         const std::vector<int>& token_ids) const {
  SceneForward fwd;
  fwd.text = text_->forward(token_ids);
  encoders::VisualPyramid pyr = visual_->forward(image, h, w);
  if (cfg_.language_gate) pyr = gate_->apply(pyr, fwd.text.sentence);
  fwd.memory = encoder_->forward(pyr);
  fwd.fused = mask_head_->fuse_fpn(fwd.memory);
  return fwd;
}

PcanModel::SceneForward PcanModel::trunk_from_var(const Var& image_chw,
                                                  const std::vector<int>& token_ids) const {
  SceneForward fwd;
  fwd.text = text_->forward(token_ids);
  encoders::VisualPyramid pyr = visual_->forward(image_chw);
  if (cfg_.language_gate) pyr = gate_->apply(pyr, fwd.text.sentence);
  fwd.memory = encoder_->forward(pyr);
  fwd.fused = mask_head_->fuse_fpn(fwd.memory);
  return fwd;
}

transformer::DecoderOutput PcanModel::decode(const SceneForward& fwd,
                                             const transformer::QueryBundle& bundle) const {
  const bool refine = bundle.origin == transformer::QueryBundle::Origin::kMatching
                          ? true
                          : cfg_.refine_contrastive_anchors;
  return decoder_->forward(fwd.memory, bundle, refine);
}

maskhead::PredictionSet PcanModel::predict_matching(const SceneForward& fwd) const {
  const auto bundle = query_builder_->matching_bundle(fwd.text.sentence);
  const auto dec = decode(fwd, bundle);
  return mask_head_->predict(dec, fwd.fused);
}

std::vector<Var> PcanModel::contrastive_group_embeddings(
    const SceneForward& fwd, const pam::ContrastiveGroupSet& groups) const {
  std::vector<Var> out;
  for (const auto& bundle : query_builder_->contrastive_bundles(fwd.text.sentence, groups)) {
    const auto dec = decode(fwd, bundle);
    Var emb = mask_head_->embed(dec.queries);
    if (!cfg_.ca_include_padded && bundle.real_rows < cfg_.queries)
      emb = slice_rows(emb, 0, bundle.real_rows);
    if (cfg_.ca_stop_gradient_groups) emb = detach(emb);
    out.push_back(emb);
  }
  return out;
}

maskhead::PredictionSet PcanModel::predict_contrastive_group(const SceneForward& fwd,
                                                             const pam::ContrastiveGroupSet& groups,
                                                             int group) const {
  const auto bundles = query_builder_->contrastive_bundles(fwd.text.sentence, groups);
  if (group < 0 || group >= int(bundles.size()))
    throw std::invalid_argument("predict_contrastive_group: group index out of range");
  const auto dec = decode(fwd, bundles[size_t(group)]);
  return mask_head_->predict(dec, fwd.fused);
}

InferenceEngine::Result InferenceEngine::infer(const std::vector<float>& image, int h, int w,
                                               const std::vector<int>& token_ids) const {
  const auto fwd = model_.trunk(image, h, w, token_ids);
  const auto preds = model_.predict_matching(fwd);

  Result res;
  const Tensor& cls = preds.class_logits.value();
  res.best_query = 0;
  for (int i = 1; i < cls.rows(); ++i)
    if (cls.at(i, 0) > cls.at(res.best_query, 0)) res.best_query = i;
  res.score = cls.at(res.best_query, 0);
  for (int j = 0; j < 4; ++j) res.box_cs[size_t(j)] = preds.boxes.value().at(res.best_query, j);

  if (h % preds.mask_h != 0 || w % preds.mask_w != 0 || h / preds.mask_h != w / preds.mask_w)
    throw std::runtime_error("InferenceEngine: image size incompatible with mask stride");
  const int factor = h / preds.mask_h;
  const Var logits = reshape(slice_rows(preds.mask_logits, res.best_query, res.best_query + 1),
                             {1, preds.mask_h, preds.mask_w});
  const Var up = upsample_bilinear(logits, factor);
  res.mask.resize(size_t(h) * w);
  res.probabilities.resize(size_t(h) * w);
  for (int64_t i = 0; i < up.value().size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-up.value()[i]));
    res.probabilities[size_t(i)] = p;
    res.mask[size_t(i)] = p > 0.5 ? 1 : 0;
  }
  return res;
}

}  // namespace pcan::model
