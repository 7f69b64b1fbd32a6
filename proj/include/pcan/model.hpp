#pragma once

#include <memory>
#include <vector>

#include "pcan/encoders.hpp"
#include "pcan/losses.hpp"
#include "pcan/maskhead.hpp"
#include "pcan/pam.hpp"
#include "pcan/synthdata.hpp"
#include "pcan/transformer.hpp"

namespace pcan::model {

using nn::ParamStore;
using nn::Tensor;
using nn::Var;

struct ModelConfig {
  int channels = 32;
  int queries = 12;
  int enc_layers = 4;
  int dec_layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int embed_dim = 64;
  int mask_channels = 8;
  int vocab = 19;
  int max_tokens = 16;
  bool max_pool = false;
  bool language_gate = true;
  bool normalize_embeddings = true;
  bool refine_contrastive_anchors = true;
  bool ca_include_padded = false;       // padded queries enter the Eq. 4 denominator
  bool ca_stop_gradient_groups = false; // block gradient into the group embeddings
  uint64_t init_seed = 0;

  void validate() const;
};

// The full network. A single parameter store backs every part, so the
// matching and contrastive decoding paths share weights by construction.
class PcanModel {
 public:
  explicit PcanModel(const ModelConfig& cfg);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

  // Shared trunk: visual/text extraction, language gating, encoder, FPN.
  struct SceneForward {
    encoders::TextFeatures text;
    transformer::MemoryFeatures memory;
    maskhead::FusedMap fused;
  };

  SceneForward trunk(const std::vector<float>& image, int h, int w,
                     const std::vector<int>& token_ids) const;
  SceneForward trunk_from_var(const Var& image_chw, const std::vector<int>& token_ids) const;

  /// Matching part: learnable position queries through the shared decoder and
  /// all prediction heads.
  maskhead::PredictionSet predict_matching(const SceneForward& fwd) const;

  /// Contrastive part: each PAM group decoded with the shared weights;
  /// returns the output embeddings of the group rows ([K,D] per group, or
  /// [N,D] when padded queries are included by config).
  std::vector<Var> contrastive_group_embeddings(const SceneForward& fwd,
                                                const pam::ContrastiveGroupSet& groups) const;

  /// Full prediction heads over one contrastive bundle (used when the
  /// contrastive part trains without the alignment loss).
  maskhead::PredictionSet predict_contrastive_group(const SceneForward& fwd,
                                                    const pam::ContrastiveGroupSet& groups,
                                                    int group) const;

  const transformer::TransformerDecoder& decoder() const { return *decoder_; }
  const transformer::QueryBuilder& query_builder() const { return *query_builder_; }
  const maskhead::MaskHead& mask_head() const { return *mask_head_; }

  transformer::DecoderOutput decode(const SceneForward& fwd,
                                    const transformer::QueryBundle& bundle) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
  std::unique_ptr<encoders::VisualEncoder> visual_;
  std::unique_ptr<encoders::TextEncoder> text_;
  std::unique_ptr<encoders::LanguageGate> gate_;
  std::unique_ptr<transformer::TransformerEncoder> encoder_;
  std::unique_ptr<transformer::TransformerDecoder> decoder_;
  std::unique_ptr<transformer::QueryBuilder> query_builder_;
  std::unique_ptr<maskhead::MaskHead> mask_head_;
};

// Inference-only wrapper: feature extraction, the matching decoder and the
// mask head. It has no access to PAM, contrastive bundles or the oracle
// detector by construction.
class InferenceEngine {
 public:
  explicit InferenceEngine(const PcanModel& model) : model_(model) {}

  struct Result {
    std::vector<uint8_t> mask;  // H*W binary, at input resolution
    std::vector<double> probabilities;  // H*W sigmoid values
    int best_query = 0;
    std::array<double, 4> box_cs{};  // center-size-normalized
    double score = 0.0;
  };

  Result infer(const std::vector<float>& image, int h, int w,
               const std::vector<int>& token_ids) const;

 private:
  const PcanModel& model_;
};

}  // namespace pcan::model
