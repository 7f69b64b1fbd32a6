#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pcan::metrics {

// One evaluation sample: binary masks of equal size.
struct MaskPair {
  std::vector<uint8_t> pred;
  std::vector<uint8_t> gt;
};

struct BucketSpec {
  int lo = 1;
  int hi = 1;  // inclusive
};

// Default expression-length grouping (1-2, 3, 4-5, 6+).
std::vector<BucketSpec> default_buckets();

struct BucketResult {
  BucketSpec spec;
  double oiou = 0.0;
  int count = 0;
};

struct EvalReport {
  double oiou = 0.0;
  double miou = 0.0;
  std::vector<double> thresholds;
  std::vector<double> precision;  // aligned with thresholds
  std::vector<BucketResult> buckets;
  int sample_count = 0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  std::string to_table() const;
};

/// Corpus-level IoU: total intersection over total union. An empty-union
/// corpus is defined as 1.0 (flagged in the report consumer, not here).
double oiou(const std::vector<MaskPair>& pairs);

/// Per-pair IoU; a pair with empty union counts as 1.0.
double pair_iou(const MaskPair& pair);

double miou(const std::vector<MaskPair>& pairs);

/// Fraction of pairs with per-pair IoU strictly above each threshold.
std::vector<double> precision_at(const std::vector<MaskPair>& pairs,
                                 const std::vector<double>& thresholds);

/// oIoU computed independently per expression-length bucket. Every length
/// must fall in exactly one bucket.
std::vector<BucketResult> bucketed_iou(const std::vector<int>& lengths,
                                       const std::vector<MaskPair>& pairs,
                                       const std::vector<BucketSpec>& buckets);

EvalReport evaluate(const std::vector<MaskPair>& pairs, const std::vector<int>& lengths,
                    const std::vector<double>& thresholds = {0.5, 0.6, 0.7, 0.8, 0.9},
                    const std::vector<BucketSpec>& buckets = default_buckets());

}  // namespace pcan::metrics
