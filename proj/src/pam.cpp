#include "pcan/pam.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pcan::pam {

using geometry::Box;
using synthdata::PriorLabel;
using synthdata::PriorSample;

namespace {

std::atomic<int64_t> g_pam_calls{0};

}  // namespace

void PamConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("PamConfig: " + m); };
  if (!(0.0 <= k1 && k1 < k2 && k2 < iou_reject && iou_reject <= 1.0))
    bad("need 0 <= k1 < k2 < iou_reject <= 1");
  if (!(0.0 < r1 && r1 < r2)) bad("need 0 < r1 < r2");
  if (alpha < 0.0 || alpha > 1.0) bad("alpha in [0, 1]");
  if (groups < 1) bad("groups >= 1");
  if (k_neg < 0) bad("k_neg >= 0");
  if (perturb_scale < 0.0 || perturb_scale >= 0.5) bad("perturb_scale in [0, 0.5)");
  if (sample_budget < 1) bad("sample_budget >= 1");
}

std::vector<PriorSample> select_negatives(const std::vector<PriorSample>& detections, const Box& gt,
                                          const PamConfig& cfg) {
  ++g_pam_calls;
  std::vector<std::pair<int, const PriorSample*>> kept;
  for (size_t i = 0; i < detections.size(); ++i) {
    const PriorSample& d = detections[i];
    if (d.confidence > cfg.alpha && geometry::iou(d.box, gt) <= cfg.iou_reject)
      kept.push_back({int(i), &d});
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second->confidence > b.second->confidence;
  });
  std::vector<PriorSample> out;
  for (size_t i = 0; i < kept.size() && int(i) < cfg.k_neg; ++i) {
    out.push_back(*kept[i].second);
    out.back().label = PriorLabel::kNegativeDetected;
  }
  return out;
}

Box random_negative(const Box& gt, int image_h, int image_w, const PamConfig& cfg, pcan::Rng& rng) {
  ++g_pam_calls;
  cfg.validate();
  const double image_aspect = double(image_h) / double(image_w);
  const double gw = gt.width(), gh = gt.height();
  int fail_iou = 0, fail_aspect = 0;
  for (int attempt = 0; attempt < cfg.sample_budget; ++attempt) {
    // Propose around the GT: aspect inside the band, area near the GT's,
    // center offset within a couple of GT extents.
    const double aspect = rng.uniform(cfg.r1 * image_aspect, cfg.r2 * image_aspect);
    const double area = gw * gh * rng.uniform(0.4, 2.2);
    double w = std::sqrt(area / aspect);
    double h = aspect * w;
    if (w >= 1.0 || h >= 1.0 || w <= 1e-4 || h <= 1e-4) continue;
    double cx = gt.cx() + rng.uniform(-1.4 * gw, 1.4 * gw);
    double cy = gt.cy() + rng.uniform(-1.4 * gh, 1.4 * gh);
    // Shift fully inside the image, preserving size.
    cx = std::min(1.0 - w / 2.0, std::max(w / 2.0, cx));
    cy = std::min(1.0 - h / 2.0, std::max(h / 2.0, cy));
    const Box cand = Box::corners_normalized(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    const double i = geometry::iou(cand, gt);
    if (!(cfg.k1 < i && i < cfg.k2)) {
      ++fail_iou;
      continue;
    }
    const double a = cand.height() / cand.width();
    if (!(cfg.r1 * image_aspect < a && a < cfg.r2 * image_aspect)) {
      ++fail_aspect;
      continue;
    }
    return cand;
  }
  const char* constraint = fail_iou >= fail_aspect ? "IoU band (k1 < IoU < k2)"
                                                   : "aspect band (r1*H/W < h/w < r2*H/W)";
  throw std::runtime_error("random_negative: sampling budget of " +
                           std::to_string(cfg.sample_budget) +
                           " attempts exhausted; most-violated constraint: " + constraint);
}

ContrastiveGroupSet replicate_and_perturb(const std::vector<PriorSample>& base, const Box& gt,
                                          int image_h, int image_w, const PamConfig& cfg,
                                          pcan::Rng& rng, PerturbRecheck recheck) {
  ++g_pam_calls;
  cfg.validate();
  if (base.empty() || base[0].label != PriorLabel::kPositive)
    throw std::invalid_argument("replicate_and_perturb: base must start with the positive sample");
  const double image_aspect = double(image_h) / double(image_w);
  auto acceptable = [&](const PriorSample& s, const Box& cand) {
    if (s.label == PriorLabel::kPositive) return true;
    const double i = geometry::iou(cand, gt);
    if (s.label == PriorLabel::kNegativeDetected) return i <= cfg.iou_reject;
    if (recheck == PerturbRecheck::kLoose) return true;
    // Synthetic negatives must stay inside the full band they were drawn from.
    const double a = cand.height() / cand.width();
    return cfg.k1 < i && i < cfg.k2 && cfg.r1 * image_aspect < a && a < cfg.r2 * image_aspect;
  };
  ContrastiveGroupSet set;
  for (int g = 0; g < cfg.groups; ++g) {
    std::vector<PriorSample> group = base;
    for (size_t i = 0; i < group.size(); ++i) {
      if (g == 0 && i == 0) continue;  // positive anchor stays the exact GT box
      PriorSample& s = group[i];
      for (int tries = 0; tries < 10; ++tries) {
        const Box cand = geometry::perturb(s.box, cfg.perturb_scale, rng);
        if (!acceptable(s, cand)) continue;
        s.box = cand;
        break;
      }
    }
    set.groups.push_back(std::move(group));
    set.positive_index.push_back(0);
  }
  return set;
}

ContrastiveGroupSet build_groups(const Box& gt, const std::vector<PriorSample>& detections,
                                 int image_h, int image_w, const PamConfig& cfg, pcan::Rng& rng) {
  ++g_pam_calls;
  cfg.validate();
  std::vector<PriorSample> base;
  base.emplace_back(gt, 1.0, PriorLabel::kPositive);
  for (auto& n : select_negatives(detections, gt, cfg)) base.push_back(n);
  while (int(base.size()) < 1 + cfg.k_neg)
    base.emplace_back(random_negative(gt, image_h, image_w, cfg, rng), 0.0,
                      PriorLabel::kNegativeSynthetic);
  return replicate_and_perturb(base, gt, image_h, image_w, cfg, rng, PerturbRecheck::kBand);
}

int64_t pam_call_count() { return g_pam_calls.load(); }

}  // namespace pcan::pam
