#include "pcan/metrics.hpp"

#include <cstdio>
#include <stdexcept>

#include <json.hpp>

namespace pcan::metrics {

using ordered_json = nlohmann::ordered_json;

std::vector<BucketSpec> default_buckets() { return {{1, 2}, {3, 3}, {4, 5}, {6, 999}}; }

namespace {

void check_pair(const MaskPair& p) {
  if (p.pred.size() != p.gt.size())
    throw std::invalid_argument("metrics: pred/gt mask shape mismatch");
}

void accumulate(const MaskPair& p, int64_t& inter, int64_t& uni) {
  check_pair(p);
  for (size_t i = 0; i < p.pred.size(); ++i) {
    const bool a = p.pred[i] != 0, b = p.gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
}

std::string bucket_label(const BucketSpec& b) {
  if (b.hi >= 999) return std::to_string(b.lo) + "+";
  if (b.lo == b.hi) return std::to_string(b.lo);
  return std::to_string(b.lo) + "-" + std::to_string(b.hi);
}

}  // namespace

double oiou(const std::vector<MaskPair>& pairs) {
  int64_t inter = 0, uni = 0;
  for (const auto& p : pairs) accumulate(p, inter, uni);
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double pair_iou(const MaskPair& pair) {
  int64_t inter = 0, uni = 0;
  accumulate(pair, inter, uni);
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double miou(const std::vector<MaskPair>& pairs) {
  if (pairs.empty()) return 1.0;
  double s = 0.0;
  for (const auto& p : pairs) s += pair_iou(p);
  return s / double(pairs.size());
}

std::vector<double> precision_at(const std::vector<MaskPair>& pairs,
                                 const std::vector<double>& thresholds) {
  for (double t : thresholds)
    if (t <= 0.0 || t >= 1.0) throw std::invalid_argument("precision_at: thresholds must be in (0,1)");
  std::vector<double> out(thresholds.size(), 0.0);
  if (pairs.empty()) return out;
  for (const auto& p : pairs) {
    const double i = pair_iou(p);
    for (size_t t = 0; t < thresholds.size(); ++t) out[t] += i > thresholds[t] ? 1.0 : 0.0;
  }
  for (auto& v : out) v /= double(pairs.size());
  return out;
}

std::vector<BucketResult> bucketed_iou(const std::vector<int>& lengths,
                                       const std::vector<MaskPair>& pairs,
                                       const std::vector<BucketSpec>& buckets) {
  if (lengths.size() != pairs.size())
    throw std::invalid_argument("bucketed_iou: lengths/pairs size mismatch");
  std::vector<std::vector<MaskPair>> grouped(buckets.size());
  for (size_t i = 0; i < lengths.size(); ++i) {
    int hit = -1;
    for (size_t b = 0; b < buckets.size(); ++b)
      if (lengths[i] >= buckets[b].lo && lengths[i] <= buckets[b].hi) {
        if (hit >= 0) throw std::invalid_argument("bucketed_iou: buckets overlap");
        hit = int(b);
      }
    if (hit < 0)
      throw std::invalid_argument("bucketed_iou: expression length " + std::to_string(lengths[i]) +
                                  " falls outside every bucket");
    grouped[size_t(hit)].push_back(pairs[i]);
  }
  std::vector<BucketResult> out;
  for (size_t b = 0; b < buckets.size(); ++b)
    out.push_back({buckets[b], oiou(grouped[b]), int(grouped[b].size())});
  return out;
}

EvalReport evaluate(const std::vector<MaskPair>& pairs, const std::vector<int>& lengths,
                    const std::vector<double>& thresholds, const std::vector<BucketSpec>& buckets) {
  EvalReport r;
  r.oiou = oiou(pairs);
  r.miou = miou(pairs);
  r.thresholds = thresholds;
  r.precision = precision_at(pairs, thresholds);
  r.buckets = bucketed_iou(lengths, pairs, buckets);
  r.sample_count = int(pairs.size());
  return r;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  j["oiou"] = oiou;
  j["miou"] = miou;
  j["precision"] = ordered_json::object();
  for (size_t i = 0; i < thresholds.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof key, "%.1f", thresholds[i]);
    j["precision"][key] = precision[i];
  }
  j["buckets"] = ordered_json::array();
  for (const auto& b : buckets) {
    ordered_json jb;
    jb["label"] = bucket_label(b.spec);
    jb["lo"] = b.spec.lo;
    jb["hi"] = b.spec.hi;
    jb["oiou"] = b.oiou;
    jb["count"] = b.count;
    j["buckets"].push_back(jb);
  }
  j["sample_count"] = sample_count;
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.oiou = j.at("oiou").get<double>();
  r.miou = j.at("miou").get<double>();
  for (auto it = j.at("precision").begin(); it != j.at("precision").end(); ++it) {
    r.thresholds.push_back(std::stod(it.key()));
    r.precision.push_back(it.value().get<double>());
  }
  for (const auto& jb : j.at("buckets")) {
    BucketResult b;
    b.spec.lo = jb.at("lo").get<int>();
    b.spec.hi = jb.at("hi").get<int>();
    b.oiou = jb.at("oiou").get<double>();
    b.count = jb.at("count").get<int>();
    r.buckets.push_back(b);
  }
  r.sample_count = j.at("sample_count").get<int>();
  return r;
}

std::string EvalReport::to_table() const {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %8s %8s", "metric", "value", "count");
  out += std::string(line) + "\n";
  std::snprintf(line, sizeof line, "%-12s %8.4f %8d", "oIoU", oiou, sample_count);
  out += std::string(line) + "\n";
  std::snprintf(line, sizeof line, "%-12s %8.4f %8d", "mIoU", miou, sample_count);
  out += std::string(line) + "\n";
  for (size_t i = 0; i < thresholds.size(); ++i) {
    std::snprintf(line, sizeof line, "Pr@%-9.1f %8.4f %8d", thresholds[i], precision[i], sample_count);
    out += std::string(line) + "\n";
  }
  for (const auto& b : buckets) {
    std::snprintf(line, sizeof line, "IoU[%-8s %8.4f %8d", (bucket_label(b.spec) + "]").c_str(),
                  b.oiou, b.count);
    out += std::string(line) + "\n";
  }
  return out;
}

}  // namespace pcan::metrics
