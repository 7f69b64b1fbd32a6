#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "pcan/metrics.hpp"
#include "pcan/rng.hpp"

using namespace pcan;
using namespace pcan::metrics;

namespace {

MaskPair pair_with(int inter, int uni, int size = 0) {
  // Builds masks with the requested intersection and union pixel counts.
  size = std::max({size, uni, 16});
  MaskPair p;
  p.pred.assign(size_t(size), 0);
  p.gt.assign(size_t(size), 0);
  for (int i = 0; i < inter; ++i) {
    p.pred[size_t(i)] = 1;
    p.gt[size_t(i)] = 1;
  }
  for (int i = inter; i < uni; ++i) p.gt[size_t(i)] = 1;
  return p;
}

MaskPair random_pair(Rng& rng, int size = 64) {
  MaskPair p;
  p.pred.resize(size_t(size));
  p.gt.resize(size_t(size));
  for (int i = 0; i < size; ++i) {
    p.pred[size_t(i)] = rng.uniform() < 0.4 ? 1 : 0;
    p.gt[size_t(i)] = rng.uniform() < 0.4 ? 1 : 0;
  }
  return p;
}

// Brute-force per-pixel counter, kept separate from the implementation.
double oracle_oiou(const std::vector<MaskPair>& pairs) {
  long long inter = 0, uni = 0;
  for (const auto& p : pairs)
    for (size_t i = 0; i < p.pred.size(); ++i) {
      if (p.pred[i] && p.gt[i]) ++inter;
      if (p.pred[i] || p.gt[i]) ++uni;
    }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

}  // namespace

TEST_CASE("oiou basics") {
  CHECK(oiou({pair_with(5, 5), pair_with(3, 3)}) == 1.0);
  CHECK(oiou({pair_with(0, 4)}) == 0.0);
  // Spec instance where oIoU and mIoU must differ: (2,4) and (0,2).
  const std::vector<MaskPair> pairs = {pair_with(2, 4), pair_with(0, 2)};
  CHECK(oiou(pairs) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(miou(pairs) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("empty-union corpus is defined as 1.0") {
  CHECK(oiou({pair_with(0, 0)}) == 1.0);
  CHECK(oiou({}) == 1.0);
}

TEST_CASE("shape mismatch is rejected") {
  MaskPair bad;
  bad.pred.assign(4, 0);
  bad.gt.assign(5, 0);
  CHECK_THROWS(oiou({bad}));
}

TEST_CASE("oiou equals the brute-force pixel counter exactly") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<MaskPair> pairs;
    const int n = 1 + rng.uniform_int(6);
    for (int i = 0; i < n; ++i) pairs.push_back(random_pair(rng));
    CHECK(oiou(pairs) == oracle_oiou(pairs));
  }
}

TEST_CASE("oiou equals miou when all pairs share one union size") {
  // Same union (8) across pairs with different intersections.
  const std::vector<MaskPair> pairs = {pair_with(2, 8), pair_with(6, 8), pair_with(4, 8)};
  CHECK(oiou(pairs) == doctest::Approx(miou(pairs)).epsilon(1e-12));
}

TEST_CASE("precision thresholds count strictly-above IoUs") {
  // Per-pair IoUs 0.55 and 0.75.
  const std::vector<MaskPair> pairs = {pair_with(11, 20), pair_with(15, 20)};
  const auto pr = precision_at(pairs, {0.5, 0.7, 0.9});
  CHECK(pr[0] == doctest::Approx(1.0));
  CHECK(pr[1] == doctest::Approx(0.5));
  CHECK(pr[2] == doctest::Approx(0.0));
}

TEST_CASE("perfect predictions give precision 1 at every threshold") {
  const std::vector<MaskPair> pairs = {pair_with(4, 4), pair_with(9, 9)};
  for (double v : precision_at(pairs, {0.5, 0.6, 0.7, 0.8, 0.9})) CHECK(v == 1.0);
}

TEST_CASE("precision is monotone non-increasing in the threshold") {
  Rng rng(2);
  const std::vector<double> thresholds = {0.5, 0.6, 0.7, 0.8, 0.9};
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<MaskPair> pairs;
    const int n = 1 + rng.uniform_int(8);
    for (int i = 0; i < n; ++i) pairs.push_back(random_pair(rng, 32));
    const auto pr = precision_at(pairs, thresholds);
    for (size_t t = 1; t < pr.size(); ++t) CHECK(pr[t] <= pr[t - 1]);
  }
}

TEST_CASE("precision rejects out-of-range thresholds") {
  CHECK_THROWS(precision_at({pair_with(1, 2)}, {0.0}));
  CHECK_THROWS(precision_at({pair_with(1, 2)}, {1.0}));
}

TEST_CASE("a single bucket covering all lengths reproduces the global oIoU") {
  Rng rng(3);
  std::vector<MaskPair> pairs;
  std::vector<int> lengths;
  for (int i = 0; i < 20; ++i) {
    pairs.push_back(random_pair(rng));
    lengths.push_back(2 + rng.uniform_int(8));
  }
  const auto res = bucketed_iou(lengths, pairs, {{1, 999}});
  REQUIRE(res.size() == 1);
  CHECK(res[0].oiou == oiou(pairs));
  CHECK(res[0].count == 20);
}

TEST_CASE("default buckets mirror the 1-2 / 3 / 4-5 / 6+ grouping") {
  const auto b = default_buckets();
  REQUIRE(b.size() == 4);
  CHECK(b[0].lo == 1);
  CHECK(b[0].hi == 2);
  CHECK(b[1].lo == 3);
  CHECK(b[1].hi == 3);
  CHECK(b[2].lo == 4);
  CHECK(b[2].hi == 5);
  CHECK(b[3].lo == 6);
}

TEST_CASE("bucket partition sums reproduce the global intersection/union") {
  Rng rng(4);
  std::vector<MaskPair> pairs;
  std::vector<int> lengths;
  for (int i = 0; i < 40; ++i) {
    pairs.push_back(random_pair(rng));
    lengths.push_back(1 + rng.uniform_int(9));
  }
  const auto res = bucketed_iou(lengths, pairs, default_buckets());
  // Recompute per-bucket I and U via the oracle and compare the pooled value
  // with the global one.
  long long ginter = 0, guni = 0;
  for (const auto& p : pairs)
    for (size_t i = 0; i < p.pred.size(); ++i) {
      ginter += p.pred[i] && p.gt[i];
      guni += p.pred[i] || p.gt[i];
    }
  double pooled_i = 0, pooled_u = 0;
  int total = 0;
  for (const auto& b : res) total += b.count;
  CHECK(total == 40);
  // Pool back: oiou_b * U_b = I_b, so gather U_b via oracle per bucket.
  std::vector<std::vector<MaskPair>> grouped(res.size());
  for (size_t i = 0; i < pairs.size(); ++i)
    for (size_t bi = 0; bi < res.size(); ++bi)
      if (lengths[i] >= res[bi].spec.lo && lengths[i] <= res[bi].spec.hi) grouped[bi].push_back(pairs[i]);
  for (size_t bi = 0; bi < res.size(); ++bi) {
    long long inter = 0, uni = 0;
    for (const auto& p : grouped[bi])
      for (size_t i = 0; i < p.pred.size(); ++i) {
        inter += p.pred[i] && p.gt[i];
        uni += p.pred[i] || p.gt[i];
      }
    if (uni > 0) CHECK(res[bi].oiou == doctest::Approx(double(inter) / double(uni)));
    pooled_i += double(inter);
    pooled_u += double(uni);
  }
  CHECK(pooled_i == double(ginter));
  CHECK(pooled_u == double(guni));
}

TEST_CASE("lengths outside every bucket are rejected") {
  CHECK_THROWS(bucketed_iou({0}, {pair_with(1, 2)}, default_buckets()));
}

TEST_CASE("evaluation report round-trips through JSON byte for byte") {
  Rng rng(5);
  std::vector<MaskPair> pairs;
  std::vector<int> lengths;
  for (int i = 0; i < 25; ++i) {
    pairs.push_back(random_pair(rng));
    lengths.push_back(2 + rng.uniform_int(6));
  }
  const EvalReport r = evaluate(pairs, lengths);
  const std::string j1 = r.to_json();
  const EvalReport r2 = EvalReport::from_json(j1);
  CHECK(r2.to_json() == j1);
  CHECK(r2.oiou == r.oiou);
  CHECK(r2.sample_count == r.sample_count);
  // The text table mentions every metric once.
  const std::string table = r.to_table();
  CHECK(table.find("oIoU") != std::string::npos);
  CHECK(table.find("Pr@0.5") != std::string::npos);
}
