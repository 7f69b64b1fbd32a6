#include "pcan/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "pcan/imageio.hpp"

namespace pcan::harness {

namespace fs = std::filesystem;
using geometry::Box;
using nn::Tensor;
using nn::Var;
using ordered_json = nlohmann::ordered_json;
using synthdata::PriorLabel;
using synthdata::PriorSample;
using synthdata::SceneRecord;

// ---------------------------------------------------------------- config

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyBinding {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("RunConfig: bad boolean value '" + v + "'");
}

const std::vector<KeyBinding>& key_bindings() {
  static const std::vector<KeyBinding> keys = [] {
    std::vector<KeyBinding> k;
    auto str = [&](const std::string& n, std::string RunConfig::*f) {
      k.push_back({n, [f](const RunConfig& c) { return c.*f; },
                   [f](RunConfig& c, const std::string& v) { c.*f = v; }});
    };
    auto u64 = [&](const std::string& n, uint64_t RunConfig::*f) {
      k.push_back({n, [f](const RunConfig& c) { return std::to_string(c.*f); },
                   [f](RunConfig& c, const std::string& v) { c.*f = std::stoull(v); }});
    };
    auto boolean = [&](const std::string& n, bool RunConfig::*f) {
      k.push_back({n, [f](const RunConfig& c) { return (c.*f) ? "true" : "false"; },
                   [f](RunConfig& c, const std::string& v) { c.*f = parse_bool(v); }});
    };
    auto integer = [&](const std::string& n, auto member_ptr) {
      k.push_back({n, [member_ptr](const RunConfig& c) { return std::to_string(c.*member_ptr); },
                   [member_ptr](RunConfig& c, const std::string& v) { c.*member_ptr = std::stoi(v); }});
    };
    auto real = [&](const std::string& n, auto member_ptr) {
      k.push_back({n, [member_ptr](const RunConfig& c) { return fmt_double(c.*member_ptr); },
                   [member_ptr](RunConfig& c, const std::string& v) { c.*member_ptr = std::stod(v); }});
    };
    auto pam_int = [&](const std::string& n, int pam::PamConfig::*f) {
      k.push_back({n, [f](const RunConfig& c) { return std::to_string(c.pam.*f); },
                   [f](RunConfig& c, const std::string& v) { c.pam.*f = std::stoi(v); }});
    };
    auto pam_real = [&](const std::string& n, double pam::PamConfig::*f) {
      k.push_back({n, [f](const RunConfig& c) { return fmt_double(c.pam.*f); },
                   [f](RunConfig& c, const std::string& v) { c.pam.*f = std::stod(v); }});
    };
    auto loss_real = [&](const std::string& n, double losses::LossWeights::*f) {
      k.push_back({n, [f](const RunConfig& c) { return fmt_double(c.loss.*f); },
                   [f](RunConfig& c, const std::string& v) { c.loss.*f = std::stod(v); }});
    };

    str("data_dir", &RunConfig::data_dir);
    str("out_dir", &RunConfig::out_dir);
    u64("seed", &RunConfig::seed);
    integer("channels", &RunConfig::channels);
    integer("queries", &RunConfig::queries);
    integer("enc_layers", &RunConfig::enc_layers);
    integer("dec_layers", &RunConfig::dec_layers);
    integer("heads", &RunConfig::heads);
    integer("ffn_mult", &RunConfig::ffn_mult);
    integer("embed_dim", &RunConfig::embed_dim);
    integer("mask_channels", &RunConfig::mask_channels);
    real("learning_rate", &RunConfig::learning_rate);
    real("weight_decay", &RunConfig::weight_decay);
    integer("epochs", &RunConfig::epochs);
    integer("batch_size", &RunConfig::batch_size);
    integer("grad_accumulation", &RunConfig::grad_accumulation);
    pam_real("pam.alpha", &pam::PamConfig::alpha);
    pam_int("pam.k_neg", &pam::PamConfig::k_neg);
    pam_real("pam.k1", &pam::PamConfig::k1);
    pam_real("pam.k2", &pam::PamConfig::k2);
    pam_real("pam.r1", &pam::PamConfig::r1);
    pam_real("pam.r2", &pam::PamConfig::r2);
    pam_real("pam.iou_reject", &pam::PamConfig::iou_reject);
    pam_int("pam.groups", &pam::PamConfig::groups);
    pam_real("pam.perturb_scale", &pam::PamConfig::perturb_scale);
    pam_int("pam.sample_budget", &pam::PamConfig::sample_budget);
    loss_real("loss.lambda_giou", &losses::LossWeights::lambda_giou);
    loss_real("loss.lambda_l1", &losses::LossWeights::lambda_l1);
    loss_real("loss.lambda_dice", &losses::LossWeights::lambda_dice);
    loss_real("loss.lambda_focal", &losses::LossWeights::lambda_focal);
    loss_real("loss.lambda_cls", &losses::LossWeights::lambda_cls);
    loss_real("loss.alpha_total", &losses::LossWeights::alpha_total);
    loss_real("loss.beta_total", &losses::LossWeights::beta_total);
    loss_real("loss.tau", &losses::LossWeights::tau);
    loss_real("loss.focal_gamma", &losses::LossWeights::focal_gamma);
    loss_real("loss.focal_balance", &losses::LossWeights::focal_balance);
    loss_real("loss.dice_eps", &losses::LossWeights::dice_eps);
    boolean("use_clum", &RunConfig::use_clum);
    boolean("use_pam", &RunConfig::use_pam);
    boolean("use_contrastive_loss", &RunConfig::use_contrastive_loss);
    str("prior_source", &RunConfig::prior_source);
    boolean("language_gate", &RunConfig::language_gate);
    boolean("max_pool", &RunConfig::max_pool);
    boolean("normalize_embeddings", &RunConfig::normalize_embeddings);
    boolean("refine_contrastive_anchors", &RunConfig::refine_contrastive_anchors);
    boolean("ca_include_padded", &RunConfig::ca_include_padded);
    boolean("ca_stop_gradient_groups", &RunConfig::ca_stop_gradient_groups);
    return k;
  }();
  return keys;
}

std::string env_name(const std::string& key) {
  std::string out = "PCAN_";
  for (char c : key) {
    if (c == '.')
      out += "__";
    else
      out += char(std::toupper(c));
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text, bool apply_env) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("RunConfig: line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& k : key_bindings())
      if (k.name == key) {
        k.set(cfg, value);
        found = true;
        break;
      }
    if (!found) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
  }
  if (apply_env) {
    for (const auto& k : key_bindings())
      if (const char* v = std::getenv(env_name(k.name).c_str())) k.set(cfg, v);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("RunConfig: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : key_bindings()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

uint64_t RunConfig::hash() const {
  const std::string text = to_text();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void RunConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("RunConfig: epochs >= 0");
  if (batch_size < 1 || grad_accumulation < 1)
    throw std::invalid_argument("RunConfig: batch_size and grad_accumulation >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("RunConfig: learning_rate > 0");
  static const std::vector<std::string> sources = {"gt+unconstrained-random", "gt+conditional-random",
                                                   "gt+oracle-detector", "gt+oracle+conditional"};
  if (std::find(sources.begin(), sources.end(), prior_source) == sources.end())
    throw std::invalid_argument("RunConfig: unknown prior_source '" + prior_source + "'");
  pam.validate();
  loss.validate();
  model_config().validate();
}

model::ModelConfig RunConfig::model_config() const {
  model::ModelConfig mc;
  mc.channels = channels;
  mc.queries = queries;
  mc.enc_layers = enc_layers;
  mc.dec_layers = dec_layers;
  mc.heads = heads;
  mc.ffn_mult = ffn_mult;
  mc.embed_dim = embed_dim;
  mc.mask_channels = mask_channels;
  mc.vocab = int(synthdata::vocabulary().size());
  mc.max_pool = max_pool;
  mc.language_gate = language_gate;
  mc.normalize_embeddings = normalize_embeddings;
  mc.refine_contrastive_anchors = refine_contrastive_anchors;
  mc.ca_include_padded = ca_include_padded;
  mc.ca_stop_gradient_groups = ca_stop_gradient_groups;
  mc.init_seed = seed;
  return mc;
}

pam::PamConfig RunConfig::effective_pam() const { return pam; }

// ---------------------------------------------------------------- checkpoint

namespace {

void put_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

uint64_t get_u64(std::ifstream& f) {
  uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void put_tensor(std::ofstream& f, const Tensor& t) {
  put_u32(f, uint32_t(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put_u32(f, uint32_t(t.dim(i)));
  f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
}

Tensor get_tensor(std::ifstream& f) {
  const uint32_t nd = get_u32(f);
  std::vector<int> shape(nd);
  for (auto& d : shape) d = int(get_u32(f));
  Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
  return t;
}

}  // namespace

Checkpoint Checkpoint::capture(const nn::ParamStore& ps, const nn::AdamW* opt, uint32_t epoch,
                               uint64_t config_hash) {
  Checkpoint ck;
  ck.epoch = epoch;
  ck.config_hash = config_hash;
  for (const auto& [name, p] : ps.items()) ck.params.push_back({name, p.value()});
  if (opt) {
    ck.has_optimizer = true;
    ck.adam_m = opt->moment1();
    ck.adam_v = opt->moment2();
    ck.adam_step = opt->raw_step();
  }
  return ck;
}

void Checkpoint::restore(nn::ParamStore& ps, nn::AdamW* opt) const {
  if (ps.count() != params.size())
    throw std::runtime_error("Checkpoint: parameter count mismatch (config differs?)");
  size_t idx = 0;
  for (auto& [name, p] : ps.items()) {
    const auto& [ck_name, ck_val] = params[idx];
    if (ck_name != name || !ck_val.same_shape(p.value()))
      throw std::runtime_error("Checkpoint: parameter '" + name + "' does not match '" + ck_name + "'");
    p.node()->value = ck_val;
    ++idx;
  }
  if (opt && has_optimizer) {
    opt->moment1() = adam_m;
    opt->moment2() = adam_v;
    opt->raw_step() = adam_step;
  }
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Checkpoint: cannot open " + path);
  f.write("PCKP", 4);
  put_u32(f, 1);
  put_u64(f, config_hash);
  put_u32(f, epoch);
  put_u32(f, has_optimizer ? 1 : 0);
  put_u64(f, uint64_t(adam_step));
  put_u32(f, uint32_t(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_tensor(f, t);
  }
  if (has_optimizer) {
    for (const auto& t : adam_m) put_tensor(f, t);
    for (const auto& t : adam_v) put_tensor(f, t);
  }
  if (!f) throw std::runtime_error("Checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "PCKP", 4) != 0)
    throw std::runtime_error("Checkpoint: bad magic in " + path);
  if (get_u32(f) != 1) throw std::runtime_error("Checkpoint: unsupported version");
  Checkpoint ck;
  ck.config_hash = get_u64(f);
  ck.epoch = get_u32(f);
  ck.has_optimizer = get_u32(f) != 0;
  ck.adam_step = int64_t(get_u64(f));
  const uint32_t n = get_u32(f);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t len = get_u32(f);
    std::string name(len, '\0');
    f.read(name.data(), len);
    ck.params.push_back({std::move(name), get_tensor(f)});
  }
  if (ck.has_optimizer) {
    for (uint32_t i = 0; i < n; ++i) ck.adam_m.push_back(get_tensor(f));
    for (uint32_t i = 0; i < n; ++i) ck.adam_v.push_back(get_tensor(f));
  }
  if (!f) throw std::runtime_error("Checkpoint: truncated file " + path);
  return ck;
}

// ---------------------------------------------------------------- priors

pam::ContrastiveGroupSet build_prior_groups(const SceneRecord& scene, const RunConfig& cfg,
                                            pcan::Rng& rng) {
  const Box gt = scene.target().box;
  const pam::PamConfig pcfg = cfg.effective_pam();
  const std::string source = cfg.use_pam ? cfg.prior_source : "gt+unconstrained-random";

  if (source == "gt+oracle+conditional")
    return pam::build_groups(gt, scene.detections, scene.height, scene.width, pcfg, rng);
  if (source == "gt+conditional-random")
    return pam::build_groups(gt, {}, scene.height, scene.width, pcfg, rng);

  std::vector<PriorSample> base;
  base.emplace_back(gt, 1.0, PriorLabel::kPositive);
  if (source == "gt+oracle-detector") {
    // Detector negatives only; the group stays smaller when fewer survive.
    for (auto& n : pam::select_negatives(scene.detections, gt, pcfg)) base.push_back(n);
  } else if (source == "gt+unconstrained-random") {
    for (int i = 0; i < pcfg.k_neg; ++i) {
      const double x1 = rng.uniform(0.0, 0.9);
      const double y1 = rng.uniform(0.0, 0.9);
      const double x2 = rng.uniform(x1 + 0.05, 1.0);
      const double y2 = rng.uniform(y1 + 0.05, 1.0);
      base.emplace_back(Box::corners_normalized(x1, y1, x2, y2), 0.0,
                        PriorLabel::kNegativeSynthetic);
    }
  } else {
    throw std::invalid_argument("build_prior_groups: unknown prior source '" + source + "'");
  }
  // Unconstrained sources were never band-limited, so only the detected-
  // negative overlap rule is re-checked after perturbation.
  return pam::replicate_and_perturb(base, gt, scene.height, scene.width, pcfg, rng,
                                    pam::PerturbRecheck::kLoose);
}

// ---------------------------------------------------------------- training

namespace {

losses::GroundTruth make_ground_truth(const SceneRecord& scene, int mask_h, int mask_w) {
  losses::GroundTruth gt;
  const auto cs = scene.target().box.to_center_size().raw();
  gt.box_cs = Tensor::from({1, 4}, {cs[0], cs[1], cs[2], cs[3]});
  gt.mask = losses::downsample_mask(scene.target().mask, scene.height, scene.width, mask_h, mask_w);
  return gt;
}

struct SceneLoss {
  Var total;
  losses::CostBreakdown matched;
  double lm = 0.0;
  double lca = 0.0;
};

SceneLoss scene_loss(const model::PcanModel& model, const SceneRecord& scene, const RunConfig& cfg,
                     pcan::Rng& rng) {
  const auto fwd = model.trunk(scene.image, scene.height, scene.width, scene.token_ids);
  const auto preds = model.predict_matching(fwd);
  const auto gt = make_ground_truth(scene, fwd.fused.height, fwd.fused.width);

  losses::MatchResult match;
  Var lm = losses::scene_matching_loss(preds, gt, cfg.loss, &match);

  SceneLoss out;
  out.matched = match.breakdowns[size_t(match.index)];
  out.lm = lm.item();

  Var lca = nn::constant_scalar(0.0);
  if (cfg.use_clum) {
    const auto groups = build_prior_groups(scene, cfg, rng);
    if (cfg.use_contrastive_loss) {
      const auto embs = model.contrastive_group_embeddings(fwd, groups);
      const Var y_p = slice_rows(preds.embeddings, match.index, match.index + 1);
      lca = losses::contrastive_alignment(y_p, embs, groups.positive_index, cfg.loss.tau);
    } else {
      // Without the alignment loss the contrastive part still trains the
      // shared decoder through its known positive query.
      Var aux = nn::constant_scalar(0.0);
      for (size_t g = 0; g < groups.groups.size(); ++g) {
        const auto cp = model.predict_contrastive_group(fwd, groups, int(g));
        const int p = groups.positive_index[g];
        aux = add(aux, losses::matching_cost(slice_rows(cp.boxes, p, p + 1),
                                             slice_rows(cp.mask_logits, p, p + 1),
                                             slice_rows(cp.class_logits, p, p + 1), gt, cfg.loss));
      }
      lm = add(lm, scale(aux, 1.0 / double(groups.groups.size())));
    }
  }
  out.lca = lca.item();
  out.total = losses::total_loss(lm, lca, cfg.loss);
  return out;
}

std::string breakdown_csv(int64_t step, const losses::CostBreakdown& bd, double lm, double lca,
                          double total) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                (long long)step, bd.l1, bd.giou_term, bd.dice, bd.mask_focal, bd.cls_focal, lm, lca,
                total);
  return buf;
}

}  // namespace

metrics::EvalReport evaluate_model(const model::PcanModel& model,
                                   const std::vector<SceneRecord>& scenes) {
  model::InferenceEngine engine(model);
  std::vector<metrics::MaskPair> pairs;
  std::vector<int> lengths;
  for (const auto& s : scenes) {
    const auto res = engine.infer(s.image, s.height, s.width, s.token_ids);
    pairs.push_back({res.mask, s.target().mask});
    lengths.push_back(int(s.tokens.size()));
  }
  return metrics::evaluate(pairs, lengths);
}

double largest_object_baseline(const std::vector<SceneRecord>& scenes) {
  std::vector<metrics::MaskPair> pairs;
  for (const auto& s : scenes) {
    size_t largest = 0;
    for (size_t k = 1; k < s.objects.size(); ++k)
      if (s.objects[k].box.area() > s.objects[largest].box.area()) largest = k;
    const auto& b = s.objects[largest].box;
    std::vector<uint8_t> pred(size_t(s.height) * s.width, 0);
    const int x0 = int(std::lround(b.x1() * s.width));
    const int x1 = int(std::lround(b.x2() * s.width));
    const int y0 = int(std::lround(b.y1() * s.height));
    const int y1 = int(std::lround(b.y2() * s.height));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) pred[size_t(y) * s.width + x] = 1;
    pairs.push_back({std::move(pred), s.target().mask});
  }
  return metrics::oiou(pairs);
}

TrainResult train(const RunConfig& cfg, const std::vector<SceneRecord>& train_scenes,
                  const std::vector<SceneRecord>& val_scenes, bool write_outputs) {
  cfg.validate();
  if (train_scenes.empty() && cfg.epochs > 0)
    throw std::invalid_argument("train: empty training split");

  model::PcanModel model(cfg.model_config());
  nn::AdamW opt(model.params(), cfg.learning_rate, cfg.weight_decay);
  pcan::Rng base_rng(cfg.seed);

  // Milestones mirror the 16/22-of-24 schedule at any epoch budget.
  const int m1 = int(std::llround(cfg.epochs * 2.0 / 3.0));
  const int m2 = int(std::llround(cfg.epochs * 11.0 / 12.0));

  TrainResult res;
  res.baseline_oiou = largest_object_baseline(val_scenes);

  std::ofstream csv;
  if (write_outputs) {
    fs::create_directories(cfg.out_dir);
    csv.open(cfg.out_dir + "/loss.csv");
    csv << "step,l1,giou,dice,mask_focal,cls_focal,lm,lca,total\n";
  }

  Checkpoint last_good = Checkpoint::capture(model.params(), &opt, 0, cfg.hash());
  int64_t step = 0;
  const int group_size = cfg.batch_size * cfg.grad_accumulation;

  for (int epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    double lr = cfg.learning_rate;
    if (epoch >= m2)
      lr *= 0.01;
    else if (epoch >= m1)
      lr *= 0.1;
    opt.set_lr(lr);

    std::vector<size_t> order(train_scenes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    pcan::Rng shuffle_rng = base_rng.child(0x500000ULL + uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(int(i)))]);

    double epoch_loss = 0.0;
    int scene_count = 0;
    for (size_t start = 0; start < order.size() && !res.aborted; start += size_t(group_size)) {
      const size_t end = std::min(order.size(), start + size_t(group_size));
      opt.zero_grad();
      losses::CostBreakdown bd_sum;
      double lm_sum = 0, lca_sum = 0, total_sum = 0;
      for (size_t i = start; i < end; ++i) {
        const SceneRecord& scene = train_scenes[order[i]];
        pcan::Rng scene_rng =
            base_rng.child(0x100000ULL + uint64_t(epoch) * 1000003ULL + uint64_t(scene.id));
        try {
          SceneLoss sl = scene_loss(model, scene, cfg, scene_rng);
          scale(sl.total, 1.0 / double(end - start)).backward();
          bd_sum.l1 += sl.matched.l1;
          bd_sum.giou_term += sl.matched.giou_term;
          bd_sum.dice += sl.matched.dice;
          bd_sum.mask_focal += sl.matched.mask_focal;
          bd_sum.cls_focal += sl.matched.cls_focal;
          lm_sum += sl.lm;
          lca_sum += sl.lca;
          total_sum += sl.total.item();
        } catch (const std::runtime_error& e) {
          res.aborted = true;
          res.abort_reason = e.what();
          break;
        }
      }
      if (res.aborted) break;
      opt.step();
      ++step;
      const double inv = 1.0 / double(end - start);
      epoch_loss += total_sum;
      scene_count += int(end - start);
      if (write_outputs) {
        losses::CostBreakdown bd{bd_sum.l1 * inv,     bd_sum.giou_term * inv, bd_sum.dice * inv,
                                 bd_sum.mask_focal * inv, bd_sum.cls_focal * inv, 0.0};
        csv << breakdown_csv(step, bd, lm_sum * inv, lca_sum * inv, total_sum * inv) << "\n";
      }
    }
    if (res.aborted) break;
    res.epoch_train_loss.push_back(epoch_loss / std::max(1, scene_count));
    res.epoch_eval.push_back(evaluate_model(model, val_scenes));
    last_good = Checkpoint::capture(model.params(), &opt, uint32_t(epoch + 1), cfg.hash());
  }

  if (cfg.epochs == 0 || res.epoch_eval.empty())
    res.epoch_eval.push_back(evaluate_model(model, val_scenes));
  res.final_checkpoint = last_good;

  if (write_outputs) {
    res.final_checkpoint.save(cfg.out_dir + "/checkpoint.bin");
    ordered_json j;
    j["config_hash"] = cfg.hash();
    j["baseline_oiou"] = res.baseline_oiou;
    j["aborted"] = res.aborted;
    if (res.aborted) j["abort_reason"] = res.abort_reason;
    j["epochs"] = ordered_json::array();
    for (size_t e = 0; e < res.epoch_eval.size(); ++e) {
      ordered_json je;
      je["epoch"] = e;
      if (e < res.epoch_train_loss.size()) je["train_loss"] = res.epoch_train_loss[e];
      je["eval"] = nlohmann::ordered_json::parse(res.epoch_eval[e].to_json());
      j["epochs"].push_back(je);
    }
    std::ofstream mj(cfg.out_dir + "/metrics.json");
    mj << j.dump(2) << "\n";
    std::ofstream rep(cfg.out_dir + "/report.txt");
    rep << "final validation metrics (baseline oIoU " << res.baseline_oiou << ")\n"
        << res.final_eval().to_table();
    std::ofstream cf(cfg.out_dir + "/config.txt");
    cf << cfg.to_text();
  }
  return res;
}

TrainResult train(const RunConfig& cfg) {
  const auto train_scenes = synthdata::load_split(cfg.data_dir, "train");
  const auto val_scenes = synthdata::load_split(cfg.data_dir, "val");
  return train(cfg, train_scenes, val_scenes, true);
}

// ---------------------------------------------------------------- ablation

std::string AblationTable::to_json() const {
  ordered_json j;
  j["axis"] = axis;
  j["rows"] = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json jr;
    jr["name"] = r.name;
    jr["report"] = nlohmann::ordered_json::parse(r.report.to_json());
    j["rows"].push_back(jr);
  }
  return j.dump(2);
}

AblationTable AblationTable::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  AblationTable t;
  t.axis = j.at("axis").get<std::string>();
  for (const auto& jr : j.at("rows"))
    t.rows.push_back({jr.at("name").get<std::string>(),
                      metrics::EvalReport::from_json(jr.at("report").dump())});
  return t;
}

std::string AblationTable::to_table() const {
  auto pr_at = [](const metrics::EvalReport& r, double x) {
    for (size_t i = 0; i < r.thresholds.size(); ++i)
      if (std::fabs(r.thresholds[i] - x) < 1e-9) return r.precision[i];
    return 0.0;
  };
  std::string out;
  char line[200];
  std::snprintf(line, sizeof line, "%-28s %8s %8s %8s %8s", ("axis: " + axis).c_str(), "Pr@0.5",
                "Pr@0.7", "Pr@0.9", "oIoU");
  out += std::string(line) + "\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-28s %8.4f %8.4f %8.4f %8.4f", r.name.c_str(),
                  pr_at(r.report, 0.5), pr_at(r.report, 0.7), pr_at(r.report, 0.9), r.report.oiou);
    out += std::string(line) + "\n";
  }
  return out;
}

AblationTable ablate(const RunConfig& base, const std::string& axis,
                     const std::vector<SceneRecord>& train_scenes,
                     const std::vector<SceneRecord>& val_scenes) {
  struct RowSpec {
    std::string name;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<RowSpec> specs;
  if (axis == "components") {
    specs = {
        {"baseline",
         [](RunConfig& c) {
           c.use_clum = false;
           c.use_contrastive_loss = false;
         }},
        {"clum w/o pam & cl",
         [](RunConfig& c) {
           c.use_clum = true;
           c.use_contrastive_loss = false;
           c.use_pam = false;
         }},
        {"clum w/o pam",
         [](RunConfig& c) {
           c.use_clum = true;
           c.use_contrastive_loss = true;
           c.use_pam = false;
         }},
        {"clum w/o cl",
         [](RunConfig& c) {
           c.use_clum = true;
           c.use_contrastive_loss = false;
           c.use_pam = true;
           c.prior_source = "gt+oracle+conditional";
         }},
        {"full",
         [](RunConfig& c) {
           c.use_clum = true;
           c.use_contrastive_loss = true;
           c.use_pam = true;
           c.prior_source = "gt+oracle+conditional";
         }},
    };
  } else if (axis == "prior_type") {
    for (const std::string src : {"gt+unconstrained-random", "gt+conditional-random",
                                  "gt+oracle-detector", "gt+oracle+conditional"})
      specs.push_back({src, [src](RunConfig& c) {
                         c.use_clum = true;
                         c.use_pam = true;
                         c.use_contrastive_loss = true;
                         c.prior_source = src;
                       }});
  } else if (axis == "k_boxes") {
    for (int boxes : {2, 4, 6, 8})
      specs.push_back({"boxes=" + std::to_string(boxes), [boxes](RunConfig& c) {
                         c.pam.k_neg = boxes - 1;  // one positive plus k_neg negatives
                       }});
  } else if (axis == "g_groups") {
    for (int g : {1, 2, 3, 4})
      specs.push_back({"groups=" + std::to_string(g), [g](RunConfig& c) { c.pam.groups = g; }});
  } else {
    throw std::invalid_argument("ablate: unknown axis '" + axis + "'");
  }

  AblationTable table;
  table.axis = axis;
  for (const auto& spec : specs) {
    RunConfig cfg = base;  // shared seed and dataset keep rows comparable
    spec.apply(cfg);
    const TrainResult r = train(cfg, train_scenes, val_scenes, false);
    table.rows.push_back({spec.name, r.final_eval()});
  }
  return table;
}

model::PcanModel load_model(const RunConfig& cfg, const std::string& checkpoint_path) {
  model::PcanModel m(cfg.model_config());
  const Checkpoint ck = Checkpoint::load(checkpoint_path);
  ck.restore(m.params(), nullptr);
  return m;
}

// ---------------------------------------------------------------- overlays

namespace {

std::vector<uint8_t> scene_rgb(const SceneRecord& s) {
  std::vector<uint8_t> rgb(size_t(s.height) * s.width * 3);
  for (size_t i = 0; i < rgb.size(); ++i)
    rgb[i] = uint8_t(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f);
  return rgb;
}

void tint(std::vector<uint8_t>& rgb, int w, int x, int y, const uint8_t color[3], double alpha) {
  for (int c = 0; c < 3; ++c) {
    auto& v = rgb[(size_t(y) * w + x) * 3 + size_t(c)];
    v = uint8_t((1.0 - alpha) * v + alpha * color[c]);
  }
}

void draw_box(std::vector<uint8_t>& rgb, int h, int w, const Box& b, const uint8_t color[3]) {
  const int x0 = std::clamp(int(std::lround(b.x1() * w)), 0, w - 1);
  const int x1 = std::clamp(int(std::lround(b.x2() * w)) - 1, 0, w - 1);
  const int y0 = std::clamp(int(std::lround(b.y1() * h)), 0, h - 1);
  const int y1 = std::clamp(int(std::lround(b.y2() * h)) - 1, 0, h - 1);
  for (int x = x0; x <= x1; ++x) {
    tint(rgb, w, x, y0, color, 1.0);
    tint(rgb, w, x, y1, color, 1.0);
  }
  for (int y = y0; y <= y1; ++y) {
    tint(rgb, w, x0, y, color, 1.0);
    tint(rgb, w, x1, y, color, 1.0);
  }
}

}  // namespace

void write_overlay_png(const std::string& path, const SceneRecord& scene,
                       const std::vector<uint8_t>& pred_mask) {
  const int h = scene.height, w = scene.width;
  const uint8_t green[3] = {40, 230, 60};
  const uint8_t blue[3] = {60, 120, 240};
  // Side by side: prediction overlay, ground-truth overlay.
  std::vector<uint8_t> left = scene_rgb(scene), right = scene_rgb(scene);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (pred_mask[size_t(y) * w + x]) tint(left, w, x, y, green, 0.55);
      if (scene.target().mask[size_t(y) * w + x]) tint(right, w, x, y, blue, 0.55);
    }
  std::vector<uint8_t> combined(size_t(h) * (2 * w + 2) * 3, 255);
  for (int y = 0; y < h; ++y) {
    std::copy(left.begin() + size_t(y) * w * 3, left.begin() + size_t(y + 1) * w * 3,
              combined.begin() + size_t(y) * (2 * w + 2) * 3);
    std::copy(right.begin() + size_t(y) * w * 3, right.begin() + size_t(y + 1) * w * 3,
              combined.begin() + (size_t(y) * (2 * w + 2) + size_t(w) + 2) * 3);
  }
  imageio::write_png(path, h, 2 * w + 2, combined);
}

void write_group_overlay_png(const std::string& path, const SceneRecord& scene,
                             const pam::ContrastiveGroupSet& groups) {
  const uint8_t green[3] = {40, 230, 60};
  const uint8_t red[3] = {235, 40, 40};
  std::vector<uint8_t> rgb = scene_rgb(scene);
  for (const auto& group : groups.groups)
    for (const auto& s : group)
      draw_box(rgb, scene.height, scene.width, s.box,
               s.label == PriorLabel::kPositive ? green : red);
  imageio::write_png(path, scene.height, scene.width, rgb);
}

}  // namespace pcan::harness
