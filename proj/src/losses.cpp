#include "pcan/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace pcan::losses {

using namespace pcan::nn;

void LossWeights::validate() const {
  for (double v : {lambda_giou, lambda_l1, lambda_dice, lambda_focal, lambda_cls, alpha_total,
                   beta_total, focal_gamma, focal_balance, dice_eps})
    if (v < 0.0) throw std::invalid_argument("LossWeights: weights must be non-negative");
  if (tau <= 0.0) throw std::invalid_argument("LossWeights: tau must be positive");
}

Tensor downsample_mask(const std::vector<uint8_t>& mask, int h, int w, int out_h, int out_w) {
  if (h % out_h != 0 || w % out_w != 0)
    throw std::invalid_argument("downsample_mask: resolution must divide evenly");
  const int fy = h / out_h, fx = w / out_w;
  Tensor out({1, out_h * out_w});
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox) {
      int count = 0;
      for (int y = oy * fy; y < (oy + 1) * fy; ++y)
        for (int x = ox * fx; x < (ox + 1) * fx; ++x) count += mask[size_t(y) * w + x];
      out[oy * out_w + ox] = count * 2 >= fy * fx ? 1.0 : 0.0;
    }
  return out;
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* what) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.value().shape_str() +
                                " vs " + b.value().shape_str());
}

// Splits a [M,4] center-size box into corner columns.
struct Corners {
  Var x1, y1, x2, y2, w, h;
};

Corners to_corners(const Var& cs) {
  Corners c;
  const Var cx = slice_cols(cs, 0, 1);
  const Var cy = slice_cols(cs, 1, 2);
  c.w = slice_cols(cs, 2, 3);
  c.h = slice_cols(cs, 3, 4);
  c.x1 = sub(cx, scale(c.w, 0.5));
  c.x2 = add(cx, scale(c.w, 0.5));
  c.y1 = sub(cy, scale(c.h, 0.5));
  c.y2 = add(cy, scale(c.h, 0.5));
  return c;
}

}  // namespace

Var dice_loss(const Var& logits, const Var& gt_mask, double eps) {
  check_same_shape(logits, gt_mask, "dice_loss");
  const Var p = sigmoid(logits);
  const Var inter = sum(mul(p, gt_mask));
  const Var denom = add(sum(p), sum(gt_mask));
  return sub(constant_scalar(1.0),
             div(add_const(scale(inter, 2.0), eps), add_const(denom, eps)));
}

Var mask_focal(const Var& logits, const Var& gt_mask, double gamma, double balance) {
  check_same_shape(logits, gt_mask, "mask_focal");
  const Var p = sigmoid(logits);
  // -log p and -log(1-p) via softplus keeps saturated logits finite.
  const Var nlp = softplus(scale(logits, -1.0));
  const Var nlq = softplus(logits);
  const Var pos = scale(mul(vpow(sub(constant(Tensor(p.value().shape(), 1.0)), p), gamma), nlp),
                        balance);
  const Var neg = scale(mul(vpow(p, gamma), nlq), 1.0 - balance);
  const Var g = gt_mask;
  const Var one_minus_g = sub(constant(Tensor(g.value().shape(), 1.0)), g);
  return mean(add(mul(g, pos), mul(one_minus_g, neg)));
}

Var cls_focal(const Var& logit, double label, double gamma, double balance) {
  if (logit.value().size() != 1) throw std::invalid_argument("cls_focal: expects a single logit");
  Tensor lt({1, 1}, label);
  return mask_focal(reshape(logit, {1, 1}), constant(std::move(lt)), gamma, balance);
}

Var l1_box(const Var& pred_box_cs, const Var& gt_box_cs) {
  check_same_shape(pred_box_cs, gt_box_cs, "l1_box");
  return sum(vabs(sub(pred_box_cs, gt_box_cs)));
}

Var giou_pair(const Var& pred_box_cs, const Var& gt_box_cs) {
  check_same_shape(pred_box_cs, gt_box_cs, "giou_pair");
  if (pred_box_cs.value().cols() != 4) throw std::invalid_argument("giou_pair: expects [1,4]");
  const Corners a = to_corners(pred_box_cs);
  const Corners b = to_corners(gt_box_cs);
  const Var iw = relu(sub(mine(a.x2, b.x2), maxe(a.x1, b.x1)));
  const Var ih = relu(sub(mine(a.y2, b.y2), maxe(a.y1, b.y1)));
  const Var inter = mul(iw, ih);
  const Var uni = sub(add(mul(a.w, a.h), mul(b.w, b.h)), inter);
  const Var hull = mul(sub(maxe(a.x2, b.x2), mine(a.x1, b.x1)),
                       sub(maxe(a.y2, b.y2), mine(a.y1, b.y1)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

Var matching_cost(const Var& box_cs, const Var& mask_logits_row, const Var& cls_logit,
                  const GroundTruth& gt, const LossWeights& w, CostBreakdown* breakdown) {
  w.validate();
  const Var gt_box = constant(gt.box_cs);
  const Var gt_mask = constant(gt.mask);
  if (mask_logits_row.value().size() != gt.mask.size())
    throw std::invalid_argument("matching_cost: mask shape mismatch");
  const Var l1 = l1_box(box_cs, gt_box);
  const Var gi = giou_pair(box_cs, gt_box);
  const Var di = dice_loss(mask_logits_row, gt_mask, w.dice_eps);
  const Var mf = mask_focal(mask_logits_row, gt_mask, w.focal_gamma, w.focal_balance);
  const Var cf = cls_focal(cls_logit, 1.0, w.focal_gamma, w.focal_balance);
  const Var giou_term = sub(constant_scalar(1.0), reshape(gi, {1}));
  Var cost = scale(reshape(l1, {1}), w.lambda_l1);
  cost = add(cost, scale(giou_term, w.lambda_giou));
  cost = add(cost, scale(reshape(di, {1}), w.lambda_dice));
  cost = add(cost, scale(reshape(mf, {1}), w.lambda_focal));
  cost = add(cost, scale(reshape(cf, {1}), w.lambda_cls));
  if (breakdown) {
    breakdown->l1 = w.lambda_l1 * l1.item();
    breakdown->giou_term = w.lambda_giou * (1.0 - gi.item());
    breakdown->dice = w.lambda_dice * di.item();
    breakdown->mask_focal = w.lambda_focal * mf.item();
    breakdown->cls_focal = w.lambda_cls * cf.item();
    breakdown->total = cost.item();
  }
  return cost;
}

MatchResult best_match(const maskhead::PredictionSet& preds, const GroundTruth& gt,
                       const LossWeights& w) {
  const int n = preds.boxes.value().rows();
  if (n < 1) throw std::invalid_argument("best_match: no predictions");
  MatchResult res;
  for (int i = 0; i < n; ++i) {
    CostBreakdown bd;
    Var c = matching_cost(slice_rows(preds.boxes, i, i + 1),
                          slice_rows(preds.mask_logits, i, i + 1),
                          slice_rows(preds.class_logits, i, i + 1), gt, w, &bd);
    res.cost_vars.push_back(c);
    res.costs.push_back(c.item());
    res.breakdowns.push_back(bd);
  }
  res.index = 0;
  for (int i = 1; i < n; ++i)
    if (res.costs[size_t(i)] < res.costs[size_t(res.index)]) res.index = i;
  return res;
}

Var scene_matching_loss(const maskhead::PredictionSet& preds, const GroundTruth& gt,
                        const LossWeights& w, MatchResult* match_out) {
  MatchResult match = best_match(preds, gt, w);
  const int n = int(match.costs.size());
  Var loss = match.cost_vars[size_t(match.index)];
  if (n > 1) {
    Var bg = constant_scalar(0.0);
    for (int i = 0; i < n; ++i) {
      if (i == match.index) continue;
      bg = add(bg, reshape(cls_focal(slice_rows(preds.class_logits, i, i + 1), 0.0, w.focal_gamma,
                                     w.focal_balance),
                           {1}));
    }
    loss = add(loss, scale(bg, w.lambda_cls / double(n - 1)));
  }
  if (match_out) *match_out = std::move(match);
  return loss;
}

Var contrastive_alignment(const Var& y_p, const std::vector<Var>& group_embeddings,
                          const std::vector<int>& positive_index, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive_alignment: tau must be positive");
  if (group_embeddings.empty()) throw std::invalid_argument("contrastive_alignment: no groups");
  if (group_embeddings.size() != positive_index.size())
    throw std::invalid_argument("contrastive_alignment: positive index count mismatch");
  const int d = y_p.value().cols();
  Var acc = constant_scalar(0.0);
  for (size_t g = 0; g < group_embeddings.size(); ++g) {
    const Var& emb = group_embeddings[g];
    if (emb.value().rows() < 1) throw std::invalid_argument("contrastive_alignment: empty group");
    if (emb.value().cols() != d)
      throw std::invalid_argument("contrastive_alignment: embedding dim mismatch");
    const int p = positive_index[g];
    if (p < 0 || p >= emb.value().rows())
      throw std::invalid_argument("contrastive_alignment: positive index out of range");
    const Var sims = scale(matmul(y_p, transpose(emb)), 1.0 / tau);  // [1, K]
    const Var term = sub(logsumexp_rows(sims), slice_cols(sims, p, p + 1));
    acc = add(acc, reshape(term, {1}));
  }
  return scale(acc, 1.0 / double(group_embeddings.size()));
}

Var total_loss(const Var& matching, const Var& contrastive, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(matching.item()))
    throw std::runtime_error("total_loss: non-finite matching loss component");
  if (!std::isfinite(contrastive.item()))
    throw std::runtime_error("total_loss: non-finite contrastive alignment component");
  const Var out = add(scale(matching, w.alpha_total), scale(contrastive, w.beta_total));
  if (!std::isfinite(out.item())) throw std::runtime_error("total_loss: non-finite total");
  return out;
}

}  // namespace pcan::losses
