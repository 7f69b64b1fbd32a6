#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcan/losses.hpp"
#include "pcan/metrics.hpp"
#include "pcan/model.hpp"
#include "pcan/pam.hpp"
#include "pcan/synthdata.hpp"

namespace pcan::harness {

// Declarative run configuration. Serialized as "key = value" lines; every
// key can be overridden through the environment as PCAN_<KEY> with dots
// spelled as double underscores (e.g. PCAN_PAM__K_NEG).
struct RunConfig {
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  uint64_t seed = 0;

  int channels = 32;
  int queries = 12;
  int enc_layers = 4;
  int dec_layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int embed_dim = 64;
  int mask_channels = 8;

  double learning_rate = 1e-4;
  double weight_decay = 5e-4;
  int epochs = 20;
  int batch_size = 4;
  int grad_accumulation = 1;  // micro-batches per optimizer step

  pam::PamConfig pam;
  losses::LossWeights loss;

  // Ablation switches.
  bool use_clum = true;
  bool use_pam = true;
  bool use_contrastive_loss = true;
  // One of: gt+unconstrained-random, gt+conditional-random,
  // gt+oracle-detector, gt+oracle+conditional.
  std::string prior_source = "gt+oracle+conditional";

  bool language_gate = true;
  bool max_pool = false;
  bool normalize_embeddings = true;
  bool refine_contrastive_anchors = true;
  bool ca_include_padded = false;
  bool ca_stop_gradient_groups = false;

  static RunConfig load(const std::string& path);
  static RunConfig from_text(const std::string& text, bool apply_env = true);
  std::string to_text() const;  // canonical form, stable key order
  uint64_t hash() const;        // FNV-1a over the canonical form
  void validate() const;

  model::ModelConfig model_config() const;
  pam::PamConfig effective_pam() const;  // k_neg/groups after switches
};

// All parameter and optimizer state needed to reproduce forward passes
// bitwise.
struct Checkpoint {
  uint32_t epoch = 0;
  uint64_t config_hash = 0;
  std::vector<std::pair<std::string, nn::Tensor>> params;
  bool has_optimizer = false;
  std::vector<nn::Tensor> adam_m, adam_v;
  int64_t adam_step = 0;

  static Checkpoint capture(const nn::ParamStore& ps, const nn::AdamW* opt, uint32_t epoch,
                            uint64_t config_hash);
  void restore(nn::ParamStore& ps, nn::AdamW* opt) const;
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

/// Positive + negatives according to cfg.prior_source, replicated into
/// perturbed contrastive groups.
pam::ContrastiveGroupSet build_prior_groups(const synthdata::SceneRecord& scene,
                                            const RunConfig& cfg, pcan::Rng& rng);

struct TrainResult {
  Checkpoint final_checkpoint;
  std::vector<double> epoch_train_loss;
  std::vector<metrics::EvalReport> epoch_eval;
  double baseline_oiou = 0.0;  // largest-object box-fill heuristic on val
  bool aborted = false;
  std::string abort_reason;

  const metrics::EvalReport& final_eval() const { return epoch_eval.back(); }
};

/// Full training run; when `write_outputs` is set, loss.csv, metrics.json,
/// checkpoint.bin and report.txt land in cfg.out_dir.
TrainResult train(const RunConfig& cfg, const std::vector<synthdata::SceneRecord>& train_scenes,
                  const std::vector<synthdata::SceneRecord>& val_scenes, bool write_outputs);

/// Loads the splits from cfg.data_dir and trains.
TrainResult train(const RunConfig& cfg);

metrics::EvalReport evaluate_model(const model::PcanModel& model,
                                   const std::vector<synthdata::SceneRecord>& scenes);

/// oIoU of predicting the largest object's box-filled mask for every scene.
double largest_object_baseline(const std::vector<synthdata::SceneRecord>& scenes);

struct AblationRow {
  std::string name;
  metrics::EvalReport report;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationRow> rows;

  std::string to_json() const;
  static AblationTable from_json(const std::string& text);
  std::string to_table() const;  // columns Pr@0.5 Pr@0.7 Pr@0.9 oIoU
};

/// Runs the row set of one ablation axis (components, prior_type, k_boxes,
/// g_groups) with a shared seed and dataset.
AblationTable ablate(const RunConfig& base, const std::string& axis,
                     const std::vector<synthdata::SceneRecord>& train_scenes,
                     const std::vector<synthdata::SceneRecord>& val_scenes);

/// Loads a checkpoint into a fresh model built from cfg.
model::PcanModel load_model(const RunConfig& cfg, const std::string& checkpoint_path);

/// Renders image + predicted mask + ground truth side by side.
void write_overlay_png(const std::string& path, const synthdata::SceneRecord& scene,
                       const std::vector<uint8_t>& pred_mask);

/// Renders the PAM groups over the scene (positive green, negatives red).
void write_group_overlay_png(const std::string& path, const synthdata::SceneRecord& scene,
                             const pam::ContrastiveGroupSet& groups);

}  // namespace pcan::harness
