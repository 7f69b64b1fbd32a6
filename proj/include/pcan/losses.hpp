#pragma once

#include <vector>

#include "pcan/maskhead.hpp"
#include "pcan/nn.hpp"

namespace pcan::losses {

using nn::Tensor;
using nn::Var;

struct LossWeights {
  double lambda_giou = 2.0;
  double lambda_l1 = 5.0;
  double lambda_dice = 5.0;
  double lambda_focal = 2.0;
  double lambda_cls = 2.0;
  double alpha_total = 1.0;
  double beta_total = 1.0;
  double tau = 0.2;
  double focal_gamma = 2.0;
  double focal_balance = 0.25;
  double dice_eps = 1.0;

  void validate() const;
};

// One scene's supervision at mask resolution.
struct GroundTruth {
  Tensor box_cs;  // [1, 4] center-size-normalized
  Tensor mask;    // [1, P] binary, P = mask_h * mask_w
};

/// Area-threshold 0.5 downsampling of a full-resolution binary mask to the
/// stride-8 grid.
Tensor downsample_mask(const std::vector<uint8_t>& mask, int h, int w, int out_h, int out_w);

// ---- individual terms (all return [1,1] scalars) ----
Var dice_loss(const Var& logits, const Var& gt_mask, double eps = 1.0);
Var mask_focal(const Var& logits, const Var& gt_mask, double gamma = 2.0, double balance = 0.25);
Var cls_focal(const Var& logit, double label, double gamma = 2.0, double balance = 0.25);
Var l1_box(const Var& pred_box_cs, const Var& gt_box_cs);
Var giou_pair(const Var& pred_box_cs, const Var& gt_box_cs);

struct CostBreakdown {
  double l1 = 0, giou_term = 0, dice = 0, mask_focal = 0, cls_focal = 0, total = 0;
};

/// Weighted per-query matching cost (classification term uses label 1):
/// lambda_l1*L1 + lambda_giou*(1-GIoU) + lambda_dice*dice +
/// lambda_focal*maskFocal + lambda_cls*clsFocal.
Var matching_cost(const Var& box_cs, const Var& mask_logits_row, const Var& cls_logit,
                  const GroundTruth& gt, const LossWeights& w, CostBreakdown* breakdown = nullptr);

struct MatchResult {
  int index = 0;
  std::vector<double> costs;
  std::vector<CostBreakdown> breakdowns;
  std::vector<Var> cost_vars;  // autograd handles, index-aligned with costs
};

/// Argmin of matching_cost over all queries; ties break to the lowest index.
MatchResult best_match(const maskhead::PredictionSet& preds, const GroundTruth& gt,
                       const LossWeights& w);

/// Matching part of the training objective: full cost at the matched query,
/// classification focal with label 0 averaged over the others.
Var scene_matching_loss(const maskhead::PredictionSet& preds, const GroundTruth& gt,
                        const LossWeights& w, MatchResult* match_out = nullptr);

/// InfoNCE-style alignment: mean over groups of -log softmax of the matched
/// embedding's similarity with the group positive (temperature tau).
/// `group_embeddings[g]` is [K_g, D] and positive_index[g] selects its
/// positive row.
Var contrastive_alignment(const Var& y_p, const std::vector<Var>& group_embeddings,
                          const std::vector<int>& positive_index, double tau);

/// alpha*L_M + beta*L_CA with non-finite components rejected by name.
Var total_loss(const Var& matching, const Var& contrastive, const LossWeights& w);

}  // namespace pcan::losses
