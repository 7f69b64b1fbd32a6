#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pcan/losses.hpp"

using namespace pcan;
using namespace pcan::nn;
using namespace pcan::losses;

namespace {

// ------------ independent scalar re-implementation (test oracle) ------------
// Plain double arithmetic, no autograd, written from the definitions.

double osigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double odice(const std::vector<double>& logits, const std::vector<double>& gt, double eps) {
  double num = 0, den = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double p = osigmoid(logits[i]);
    num += p * gt[i];
    den += p + gt[i];
  }
  return 1.0 - (2.0 * num + eps) / (den + eps);
}

double ofocal(const std::vector<double>& logits, const std::vector<double>& gt, double gamma,
              double balance) {
  double acc = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double p = osigmoid(logits[i]);
    if (gt[i] > 0.5)
      acc += -balance * std::pow(1.0 - p, gamma) * std::log(p);
    else
      acc += -(1.0 - balance) * std::pow(p, gamma) * std::log(1.0 - p);
  }
  return acc / double(logits.size());
}

double ogiou(const std::array<double, 4>& a_cs, const std::array<double, 4>& b_cs) {
  auto corners = [](const std::array<double, 4>& b) {
    return std::array<double, 4>{b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2};
  };
  const auto a = corners(a_cs), b = corners(b_cs);
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = a_cs[2] * a_cs[3] + b_cs[2] * b_cs[3] - inter;
  const double hull = (std::max(a[2], b[2]) - std::min(a[0], b[0])) *
                      (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / uni - (hull - uni) / hull;
}

double omatching_cost(const std::array<double, 4>& box, const std::vector<double>& mask_logits,
                      double cls_logit, const std::array<double, 4>& gt_box,
                      const std::vector<double>& gt_mask, const LossWeights& w) {
  double l1 = 0;
  for (int j = 0; j < 4; ++j) l1 += std::fabs(box[size_t(j)] - gt_box[size_t(j)]);
  const double gi = ogiou(box, gt_box);
  const double di = odice(mask_logits, gt_mask, w.dice_eps);
  const double mf = ofocal(mask_logits, gt_mask, w.focal_gamma, w.focal_balance);
  const double cf = ofocal({cls_logit}, {1.0}, w.focal_gamma, w.focal_balance);
  return w.lambda_l1 * l1 + w.lambda_giou * (1.0 - gi) + w.lambda_dice * di + w.lambda_focal * mf +
         w.lambda_cls * cf;
}

double ocontrastive(const std::vector<double>& y_p, const std::vector<std::vector<double>>& groups,
                    const std::vector<int>& pos, int dim, double tau) {
  double acc = 0;
  for (size_t g = 0; g < groups.size(); ++g) {
    const int k = int(groups[g].size()) / dim;
    double mx = -1e300;
    std::vector<double> sims(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      double s = 0;
      for (int j = 0; j < dim; ++j) s += y_p[size_t(j)] * groups[g][size_t(i * dim + j)];
      sims[size_t(i)] = s / tau;
      mx = std::max(mx, sims[size_t(i)]);
    }
    double z = 0;
    for (int i = 0; i < k; ++i) z += std::exp(sims[size_t(i)] - mx);
    acc += (mx + std::log(z)) - sims[size_t(pos[g])];
  }
  return acc / double(groups.size());
}

// ------------ helpers ------------

struct RandomInstance {
  std::array<double, 4> box, gt_box;
  std::vector<double> mask_logits, gt_mask;
  double cls_logit;
};

RandomInstance random_instance(Rng& rng, int pixels = 16) {
  RandomInstance in;
  auto rand_box = [&]() {
    return std::array<double, 4>{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                 rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
  };
  in.box = rand_box();
  in.gt_box = rand_box();
  for (int i = 0; i < pixels; ++i) {
    in.mask_logits.push_back(rng.uniform(-3, 3));
    in.gt_mask.push_back(rng.uniform() < 0.5 ? 0.0 : 1.0);
  }
  in.cls_logit = rng.uniform(-3, 3);
  return in;
}

GroundTruth make_gt(const RandomInstance& in) {
  GroundTruth gt;
  gt.box_cs = Tensor::from({1, 4}, {in.gt_box[0], in.gt_box[1], in.gt_box[2], in.gt_box[3]});
  gt.mask = Tensor::from({1, int(in.gt_mask.size())}, std::vector<double>(in.gt_mask));
  return gt;
}

Var row(const std::vector<double>& v) { return constant(Tensor::from({1, int(v.size())}, std::vector<double>(v))); }
Var row4(const std::array<double, 4>& v) { return constant(Tensor::from({1, 4}, {v[0], v[1], v[2], v[3]})); }

}  // namespace

TEST_CASE("matching cost equals the scalar oracle on random instances") {
  Rng rng(1);
  LossWeights w;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto in = random_instance(rng);
    const auto gt = make_gt(in);
    const Var cost =
        matching_cost(row4(in.box), row(in.mask_logits), row({in.cls_logit}), gt, w);
    const double expect = omatching_cost(in.box, in.mask_logits, in.cls_logit, in.gt_box, in.gt_mask, w);
    CHECK(std::fabs(cost.item() - expect) < 1e-9);
  }
}

TEST_CASE("perfect prediction drives the cost to (almost) zero") {
  LossWeights w;
  GroundTruth gt;
  gt.box_cs = Tensor::from({1, 4}, {0.5, 0.5, 0.3, 0.3});
  std::vector<double> gmask = {1, 1, 0, 0, 1, 0, 1, 0};
  gt.mask = Tensor::from({1, 8}, std::vector<double>(gmask));
  std::vector<double> logits;
  for (double g : gmask) logits.push_back(g > 0.5 ? 30.0 : -30.0);
  const Var cost = matching_cost(row4({0.5, 0.5, 0.3, 0.3}), row(logits), row({30.0}), gt, w);
  CHECK(cost.item() < 1e-3);
  CHECK(cost.item() >= 0.0);
}

TEST_CASE("doubling one weight doubles only that breakdown term") {
  Rng rng(2);
  const auto in = random_instance(rng);
  const auto gt = make_gt(in);
  LossWeights w;
  CostBreakdown a, b;
  matching_cost(row4(in.box), row(in.mask_logits), row({in.cls_logit}), gt, w, &a);
  w.lambda_l1 *= 2.0;
  matching_cost(row4(in.box), row(in.mask_logits), row({in.cls_logit}), gt, w, &b);
  CHECK(b.l1 == doctest::Approx(2.0 * a.l1));
  CHECK(b.giou_term == doctest::Approx(a.giou_term));
  CHECK(b.dice == doctest::Approx(a.dice));
  CHECK(b.mask_focal == doctest::Approx(a.mask_focal));
  CHECK(b.cls_focal == doctest::Approx(a.cls_focal));
}

TEST_CASE("mask focal at p=0.5 equals the closed form") {
  LossWeights w;
  std::vector<double> gmask = {1, 0, 0, 1, 0};
  std::vector<double> logits(5, 0.0);
  const double term_pos = -0.25 * 0.25 * std::log(0.5);
  const double term_neg = -0.75 * 0.25 * std::log(0.5);
  const double expect = (2 * term_pos + 3 * term_neg) / 5.0;
  const Var mf = mask_focal(row(logits), row(gmask), w.focal_gamma, w.focal_balance);
  CHECK(mf.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("dice reaches zero on perfect overlap") {
  std::vector<double> ones(6, 1.0);
  std::vector<double> logits(6, 40.0);
  CHECK(dice_loss(row(logits), row(ones)).item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("loss terms reject shape mismatches") {
  CHECK_THROWS(dice_loss(row({1, 2, 3}), row({1, 0})));
  CHECK_THROWS(mask_focal(row({1, 2}), row({1, 0, 0})));
  CHECK_THROWS(l1_box(row({0.1, 0.2, 0.3, 0.4}), row({0.1, 0.2})));
  GroundTruth gt;
  gt.box_cs = Tensor::from({1, 4}, {0.5, 0.5, 0.3, 0.3});
  gt.mask = Tensor({1, 8});
  LossWeights w;
  CHECK_THROWS(matching_cost(row4({0.5, 0.5, 0.3, 0.3}), row({1, 2, 3}), row({0.0}), gt, w));
}

TEST_CASE("every loss term passes a finite-difference gradient check") {
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const auto in = random_instance(rng, 8);
    const auto gt = make_gt(in);
    const LossWeights w;

    ParamStore ps;
    Var logits = ps.add("logits", Tensor::from({1, 8}, std::vector<double>(in.mask_logits)));
    Var box_raw = ps.add("box", Tensor::from({1, 4}, {0.1, -0.2, 0.05, 0.3}));
    Var cls = ps.add("cls", Tensor::from({1, 1}, {in.cls_logit}));

    auto box_cs = [&]() { return sigmoid(box_raw); };
    auto gt_box = [&]() { return constant(gt.box_cs); };
    auto gt_mask = [&]() { return constant(gt.mask); };

    CHECK(gradient_check(ps, [&]() { return reshape(dice_loss(logits, gt_mask()), {1}); }, 1e-6) < 1e-6);
    CHECK(gradient_check(ps, [&]() { return reshape(mask_focal(logits, gt_mask()), {1}); }, 1e-6) < 1e-6);
    CHECK(gradient_check(ps, [&]() { return reshape(cls_focal(cls, 1.0), {1}); }, 1e-6) < 1e-6);
    CHECK(gradient_check(ps, [&]() { return reshape(l1_box(box_cs(), gt_box()), {1}); }, 1e-6) < 1e-5);
    CHECK(gradient_check(ps, [&]() { return reshape(giou_pair(box_cs(), gt_box()), {1}); }, 1e-6) < 1e-5);
    CHECK(gradient_check(ps, [&]() {
            return matching_cost(box_cs(), logits, cls, gt, w);
          }, 1e-6) < 1e-5);
  }
}

namespace {

maskhead::PredictionSet make_preds(const std::vector<RandomInstance>& ins) {
  maskhead::PredictionSet preds;
  const int n = int(ins.size());
  const int p = int(ins[0].mask_logits.size());
  Tensor boxes({n, 4}), cls({n, 1}), masks({n, p});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) boxes.at(i, j) = ins[size_t(i)].box[size_t(j)];
    cls.at(i, 0) = ins[size_t(i)].cls_logit;
    for (int j = 0; j < p; ++j) masks.at(i, j) = ins[size_t(i)].mask_logits[size_t(j)];
  }
  preds.boxes = leaf(std::move(boxes), false);
  preds.class_logits = leaf(std::move(cls), false);
  preds.mask_logits = leaf(std::move(masks), false);
  Tensor emb({n, 4}, 0.5);
  preds.embeddings = leaf(std::move(emb), false);
  preds.mask_h = 4;
  preds.mask_w = p / 4;
  return preds;
}

}  // namespace

TEST_CASE("best_match agrees with exhaustive enumeration via the oracle") {
  Rng rng(4);
  LossWeights w;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + rng.uniform_int(8);
    std::vector<RandomInstance> ins;
    for (int i = 0; i < n; ++i) ins.push_back(random_instance(rng, 8));
    // All queries scored against the same ground truth.
    const auto gt_inst = random_instance(rng, 8);
    GroundTruth gt = make_gt(gt_inst);
    const auto preds = make_preds(ins);
    const auto res = best_match(preds, gt, w);
    int expect = 0;
    double best = 1e300;
    for (int i = 0; i < n; ++i) {
      const double c = omatching_cost(ins[size_t(i)].box, ins[size_t(i)].mask_logits,
                                      ins[size_t(i)].cls_logit, gt_inst.gt_box, gt_inst.gt_mask, w);
      if (c < best - 1e-12) {
        best = c;
        expect = i;
      }
    }
    CHECK(res.index == expect);
  }
}

TEST_CASE("best_match tie-breaks to the lowest index") {
  Rng rng(5);
  auto in = random_instance(rng, 8);
  std::vector<RandomInstance> ins = {in, in, in};  // identical costs
  GroundTruth gt = make_gt(in);
  LossWeights w;
  CHECK(best_match(make_preds(ins), gt, w).index == 0);
}

TEST_CASE("best_match is invariant under uniform positive rescaling of the cost") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RandomInstance> ins;
    for (int i = 0; i < 5; ++i) ins.push_back(random_instance(rng, 8));
    const auto gt_inst = random_instance(rng, 8);
    GroundTruth gt = make_gt(gt_inst);
    LossWeights w;
    const int a = best_match(make_preds(ins), gt, w).index;
    const double k = 3.7;
    w.lambda_l1 *= k;
    w.lambda_giou *= k;
    w.lambda_dice *= k;
    w.lambda_focal *= k;
    w.lambda_cls *= k;
    CHECK(best_match(make_preds(ins), gt, w).index == a);
  }
}

TEST_CASE("contrastive alignment reproduces log(N) on uniform similarities") {
  // All embeddings identical: every similarity equal, softmax uniform.
  Tensor emb({6, 4});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) emb.at(i, j) = 0.5;
  const Var group = constant(emb);
  const Var y_p = constant(Tensor::from({1, 4}, {0.1, 0.2, 0.3, 0.4}));
  const Var l = contrastive_alignment(y_p, {group}, {0}, 0.2);
  CHECK(std::fabs(l.item() - std::log(6.0)) < 1e-9);
}

TEST_CASE("contrastive alignment matches the paper-style extreme case") {
  // Positive similarity 1, five negatives at -1, tau = 0.2.
  const int d = 1;
  const Var y_p = constant(Tensor::from({1, d}, {1.0}));
  Tensor emb({6, d});
  emb.at(0, 0) = 1.0;
  for (int i = 1; i < 6; ++i) emb.at(i, 0) = -1.0;
  const Var l = contrastive_alignment(y_p, {constant(emb)}, {0}, 0.2);
  const double expect = std::log(1.0 + 5.0 * std::exp(-10.0));
  CHECK(std::fabs(l.item() - expect) < 1e-9);
  CHECK(l.item() == doctest::Approx(2.27e-4).epsilon(0.01));
}

TEST_CASE("contrastive alignment matches the scalar oracle on random instances") {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 3 + rng.uniform_int(4);
    const int g = 1 + rng.uniform_int(3);
    std::vector<double> ypv;
    for (int j = 0; j < d; ++j) ypv.push_back(rng.uniform(-1, 1));
    std::vector<Var> groups;
    std::vector<std::vector<double>> ogroups;
    std::vector<int> pos;
    for (int gi = 0; gi < g; ++gi) {
      const int k = 2 + rng.uniform_int(5);
      Tensor emb({k, d});
      std::vector<double> flat;
      for (int64_t i = 0; i < emb.size(); ++i) {
        emb[i] = rng.uniform(-1, 1);
        flat.push_back(emb[i]);
      }
      groups.push_back(constant(std::move(emb)));
      ogroups.push_back(flat);
      pos.push_back(rng.uniform_int(k));
    }
    const Var y_p = constant(Tensor::from({1, d}, std::vector<double>(ypv)));
    const Var l = contrastive_alignment(y_p, groups, pos, 0.2);
    CHECK(std::fabs(l.item() - ocontrastive(ypv, ogroups, pos, d, 0.2)) < 1e-9);
  }
}

TEST_CASE("contrastive alignment over identical groups equals the single-group value") {
  Rng rng(8);
  Tensor emb({5, 3});
  for (int64_t i = 0; i < emb.size(); ++i) emb[i] = rng.uniform(-1, 1);
  const Var y_p = constant(Tensor::from({1, 3}, {0.3, -0.2, 0.9}));
  const Var one = contrastive_alignment(y_p, {constant(emb)}, {1}, 0.2);
  const Var three = contrastive_alignment(y_p, {constant(emb), constant(emb), constant(emb)},
                                          {1, 1, 1}, 0.2);
  CHECK(one.item() == doctest::Approx(three.item()).epsilon(1e-12));
}

TEST_CASE("contrastive alignment is invariant to a constant similarity shift") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    // y_p = [1], so adding c to every group entry shifts all similarities by c.
    const Var y_p = constant(Tensor::from({1, 1}, {1.0}));
    const int k = 3 + rng.uniform_int(4);
    Tensor emb({k, 1});
    for (int64_t i = 0; i < emb.size(); ++i) emb[i] = rng.uniform(-2, 2);
    Tensor shifted = emb;
    const double c = rng.uniform(-5, 5);
    for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += c;
    const int p = rng.uniform_int(k);
    const Var a = contrastive_alignment(y_p, {constant(emb)}, {p}, 0.2);
    const Var b = contrastive_alignment(y_p, {constant(shifted)}, {p}, 0.2);
    CHECK(a.item() == doctest::Approx(b.item()).epsilon(1e-9));
  }
}

TEST_CASE("per-group terms with unit embeddings respect the [0, log K + 2/tau] bound") {
  Rng rng(10);
  const double tau = 0.2;
  for (int trial = 0; trial < 500; ++trial) {
    const int d = 4, k = 2 + rng.uniform_int(6);
    auto unit = [&](Tensor& t, int r) {
      double n = 0;
      for (int j = 0; j < d; ++j) n += t.at(r, j) * t.at(r, j);
      for (int j = 0; j < d; ++j) t.at(r, j) /= std::sqrt(n);
    };
    Tensor emb({k, d});
    for (int64_t i = 0; i < emb.size(); ++i) emb[i] = rng.normal();
    for (int r = 0; r < k; ++r) unit(emb, r);
    Tensor yp({1, d});
    for (int j = 0; j < d; ++j) yp[j] = rng.normal();
    double n = 0;
    for (int j = 0; j < d; ++j) n += yp[j] * yp[j];
    for (int j = 0; j < d; ++j) yp[j] /= std::sqrt(n);
    const Var l = contrastive_alignment(constant(yp), {constant(emb)}, {rng.uniform_int(k)}, tau);
    CHECK(l.item() >= 0.0);
    CHECK(l.item() <= std::log(double(k)) + 2.0 / tau);
  }
}

TEST_CASE("contrastive alignment gradient check") {
  Rng rng(11);
  ParamStore ps;
  Var y_p = ps.add("y_p", xavier_uniform({1, 4}, 4, 4, rng));
  Var g1 = ps.add("g1", xavier_uniform({5, 4}, 4, 4, rng));
  Var g2 = ps.add("g2", xavier_uniform({3, 4}, 4, 4, rng));
  auto loss = [&]() {
    return contrastive_alignment(l2_normalize_rows(y_p),
                                 {l2_normalize_rows(g1), l2_normalize_rows(g2)}, {0, 2}, 0.2);
  };
  CHECK(gradient_check(ps, loss, 1e-6) < 1e-6);
}

TEST_CASE("contrastive alignment rejects malformed groups") {
  const Var y_p = constant(Tensor::from({1, 2}, {1.0, 0.0}));
  CHECK_THROWS(contrastive_alignment(y_p, {}, {}, 0.2));
  CHECK_THROWS(contrastive_alignment(y_p, {constant(Tensor({3, 2}))}, {5}, 0.2));
  CHECK_THROWS(contrastive_alignment(y_p, {constant(Tensor({3, 3}))}, {0}, 0.2));
  CHECK_THROWS(contrastive_alignment(y_p, {constant(Tensor({3, 2}))}, {0}, 0.0));
}

TEST_CASE("total loss is the weighted sum and zeroing beta removes the contrastive part") {
  LossWeights w;
  const Var lm = constant_scalar(2.0);
  const Var lca = constant_scalar(3.0);
  CHECK(total_loss(lm, lca, w).item() == doctest::Approx(5.0));
  w.beta_total = 0.0;
  CHECK(total_loss(lm, lca, w).item() == doctest::Approx(2.0));
}

TEST_CASE("total loss aborts naming the non-finite component") {
  LossWeights w;
  const Var nan_v = constant_scalar(std::nan(""));
  const Var ok = constant_scalar(1.0);
  CHECK_THROWS_WITH_AS(total_loss(nan_v, ok, w), doctest::Contains("matching"), std::runtime_error);
  CHECK_THROWS_WITH_AS(total_loss(ok, nan_v, w), doctest::Contains("contrastive"),
                       std::runtime_error);
}

TEST_CASE("each loss decreases after one small gradient step") {
  Rng rng(12);
  int passes = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = random_instance(rng, 8);
    const auto gt = make_gt(in);
    LossWeights w;
    ParamStore ps;
    Var logits = ps.add("logits", Tensor::from({1, 8}, std::vector<double>(in.mask_logits)));
    Var box_raw = ps.add("box", Tensor::from({1, 4}, {0.2, -0.1, 0.4, -0.3}));
    Var cls = ps.add("cls", Tensor::from({1, 1}, {in.cls_logit}));
    auto loss_fn = [&]() {
      return matching_cost(sigmoid(box_raw), logits, cls, gt, w);
    };
    ps.zero_grad();
    Var before = loss_fn();
    before.backward();
    const double lr = 1e-3;
    for (auto& [name, p] : ps.items())
      for (int64_t i = 0; i < p.node()->value.size(); ++i)
        p.node()->value[i] -= lr * p.node()->grad_buf()[i];
    passes += loss_fn().item() < before.item() ? 1 : 0;
  }
  CHECK(passes >= 9);
}

TEST_CASE("downsampling binarizes by area threshold") {
  // 4x4 mask to 2x2: quadrant fills of 4/4, 2/4, 1/4, 0/4.
  std::vector<uint8_t> mask = {
      1, 1, 1, 0,
      1, 1, 1, 0,
      1, 0, 0, 0,
      0, 0, 0, 0,
  };
  const Tensor out = downsample_mask(mask, 4, 4, 2, 2);
  CHECK(out[0] == 1.0);  // 4/4
  CHECK(out[1] == 1.0);  // 2/4 meets the 0.5 threshold
  CHECK(out[2] == 0.0);  // 1/4
  CHECK(out[3] == 0.0);  // 0/4
}
