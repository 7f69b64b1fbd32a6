#pragma once

#include <cstdint>
#include <vector>

#include "pcan/geometry.hpp"
#include "pcan/rng.hpp"
#include "pcan/synthdata.hpp"

namespace pcan::pam {

struct PamConfig {
  double alpha = 0.35;      // detector confidence threshold
  int k_neg = 5;            // negatives kept per group
  double k1 = 0.1;          // synthetic-negative IoU band, lower
  double k2 = 0.3;          // synthetic-negative IoU band, upper
  double r1 = 0.5;          // aspect band multiplier, lower
  double r2 = 1.5;          // aspect band multiplier, upper
  double iou_reject = 0.5;  // detected negatives above this overlap are dropped
  int groups = 3;
  double perturb_scale = 0.1;
  int sample_budget = 1000;  // rejection-sampling attempts before giving up

  void validate() const;
};

// G groups of (1 + k_neg) samples each; groups differ only by perturbation.
// positive_index marks the single positive per group (always row 0 by
// construction).
struct ContrastiveGroupSet {
  std::vector<std::vector<synthdata::PriorSample>> groups;
  std::vector<int> positive_index;

  int group_size() const { return groups.empty() ? 0 : int(groups[0].size()); }
};

/// Keeps detections with confidence > alpha and IoU(box, gt) <= iou_reject,
/// sorted by confidence descending (ties stay in input order), truncated to
/// k_neg.
std::vector<synthdata::PriorSample> select_negatives(
    const std::vector<synthdata::PriorSample>& detections, const geometry::Box& gt,
    const PamConfig& cfg);

/// Draws a box b with k1 < IoU(b, gt) < k2 and
/// r1*(H/W) < height(b)/width(b) < r2*(H/W) by bounded rejection sampling.
/// Throws naming the violated constraint when the budget runs out.
geometry::Box random_negative(const geometry::Box& gt, int image_h, int image_w,
                              const PamConfig& cfg, pcan::Rng& rng);

// How perturbed samples are re-validated. kBand holds synthetic negatives to
// the full Eq-3-style band (needs the image aspect); kLoose only keeps
// detected negatives under iou_reject, for callers whose synthetic samples
// were never band-constrained.
enum class PerturbRecheck { kBand, kLoose };

/// Replicates a base sample set (positive first) G times with per-group
/// perturbation; the group-0 positive stays untouched. Perturbed negatives
/// are re-checked per the policy and re-perturbed up to 10 times, then left
/// unperturbed.
ContrastiveGroupSet replicate_and_perturb(const std::vector<synthdata::PriorSample>& base,
                                          const geometry::Box& gt, int image_h, int image_w,
                                          const PamConfig& cfg, pcan::Rng& rng,
                                          PerturbRecheck recheck = PerturbRecheck::kBand);

/// Assembles the contrastive groups: GT positive plus selected negatives,
/// topped up with synthetic negatives, replicated G times with per-group
/// perturbation (the group-0 positive stays the exact GT box).
ContrastiveGroupSet build_groups(const geometry::Box& gt,
                                 const std::vector<synthdata::PriorSample>& detections, int image_h,
                                 int image_w, const PamConfig& cfg, pcan::Rng& rng);

/// Number of PAM entry-point calls so far in this process; the inference
/// path is required to leave this untouched.
int64_t pam_call_count();

}  // namespace pcan::pam
