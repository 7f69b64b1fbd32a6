#include "pcan/synthdata.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "pcan/imageio.hpp"

namespace pcan::synthdata {

namespace fs = std::filesystem;
using geometry::Box;
using ordered_json = nlohmann::ordered_json;

namespace {

std::atomic<int64_t> g_oracle_calls{0};

const float kPalette[8][3] = {
    {0.85f, 0.10f, 0.10f},  // red
    {0.10f, 0.70f, 0.15f},  // green
    {0.15f, 0.25f, 0.85f},  // blue
    {0.90f, 0.85f, 0.10f},  // yellow
    {0.55f, 0.15f, 0.70f},  // purple
    {0.95f, 0.55f, 0.10f},  // orange
    {0.10f, 0.80f, 0.85f},  // cyan
    {0.95f, 0.55f, 0.75f},  // pink
};

const std::vector<std::string> kColorNames = {"red",    "green",  "blue", "yellow",
                                              "purple", "orange", "cyan", "pink"};

struct PixelBox {
  int x0, y0, x1, y1;  // inclusive
};

bool inside_shape(ShapeKind s, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  switch (s) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return std::fabs(dx) <= r && std::fabs(dy) <= r;
    case ShapeKind::kTriangle: {
      // Apex up: vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r).
      if (dy > r || dy < -r) return false;
      const double half_width = (dy + r) / 2.0;
      return std::fabs(dx) <= half_width;
    }
  }
  return false;
}

int shape_index(ShapeKind s) { return int(s); }

std::optional<SizeKind> parse_size(const std::string& w) {
  if (w == "small") return SizeKind::kSmall;
  if (w == "large") return SizeKind::kLarge;
  return std::nullopt;
}

std::optional<int> parse_color(const std::string& w) {
  for (size_t i = 0; i < kColorNames.size(); ++i)
    if (kColorNames[i] == w) return int(i);
  return std::nullopt;
}

std::optional<ShapeKind> parse_shape(const std::string& w) {
  if (w == "circle") return ShapeKind::kCircle;
  if (w == "square") return ShapeKind::kSquare;
  if (w == "triangle") return ShapeKind::kTriangle;
  return std::nullopt;
}

bool matches_clause(const ObjectSpec& o, std::optional<SizeKind> size, std::optional<int> color,
                    std::optional<ShapeKind> shape) {
  if (size && o.size != *size) return false;
  if (color && o.color != *color) return false;
  if (shape && o.shape != *shape) return false;
  return true;
}

}  // namespace

const std::vector<std::string>& color_names() { return kColorNames; }
const float* color_rgb(int color) { return kPalette[color]; }

const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

const char* size_name(SizeKind s) { return s == SizeKind::kSmall ? "small" : "large"; }

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v = {"the", "small", "large"};
    for (auto& c : kColorNames) v.push_back(c);
    v.insert(v.end(), {"circle", "square", "triangle", "left", "right", "above", "below", "of"});
    return v;
  }();
  return vocab;
}

int token_id(const std::string& word) {
  const auto& v = vocabulary();
  for (size_t i = 0; i < v.size(); ++i)
    if (v[i] == word) return int(i);
  throw std::invalid_argument("token_id: unknown word '" + word + "'");
}

const char* to_string(PriorLabel l) {
  switch (l) {
    case PriorLabel::kPositive: return "positive";
    case PriorLabel::kNegativeDetected: return "negative-detected";
    case PriorLabel::kNegativeSynthetic: return "negative-synthetic";
  }
  return "?";
}

PriorLabel prior_label_from_string(const std::string& s) {
  if (s == "positive") return PriorLabel::kPositive;
  if (s == "negative-detected") return PriorLabel::kNegativeDetected;
  if (s == "negative-synthetic") return PriorLabel::kNegativeSynthetic;
  throw std::invalid_argument("unknown prior label: " + s);
}

Expression parse_expression(const std::vector<std::string>& tokens) {
  Expression e;
  size_t i = 0;
  auto expect_the = [&] {
    if (i >= tokens.size() || tokens[i] != "the")
      throw std::invalid_argument("parse_expression: expected 'the'");
    ++i;
  };
  auto read_clause = [&](std::optional<SizeKind>& size, std::optional<int>& color, ShapeKind& shape) {
    if (i < tokens.size())
      if (auto s = parse_size(tokens[i])) {
        size = s;
        ++i;
      }
    if (i < tokens.size())
      if (auto c = parse_color(tokens[i])) {
        color = c;
        ++i;
      }
    if (i >= tokens.size()) throw std::invalid_argument("parse_expression: missing shape word");
    if (auto s = parse_shape(tokens[i])) {
      shape = *s;
      ++i;
    } else {
      throw std::invalid_argument("parse_expression: expected shape, got '" + tokens[i] + "'");
    }
  };
  expect_the();
  read_clause(e.size, e.color, e.shape);
  if (i < tokens.size()) {
    if (tokens[i] == "left" || tokens[i] == "right") {
      e.rel = tokens[i] == "left" ? Expression::Rel::kLeftOf : Expression::Rel::kRightOf;
      ++i;
      if (i >= tokens.size() || tokens[i] != "of")
        throw std::invalid_argument("parse_expression: expected 'of'");
      ++i;
    } else if (tokens[i] == "above" || tokens[i] == "below") {
      e.rel = tokens[i] == "above" ? Expression::Rel::kAbove : Expression::Rel::kBelow;
      ++i;
    } else {
      throw std::invalid_argument("parse_expression: unexpected token '" + tokens[i] + "'");
    }
    expect_the();
    ShapeKind anchor_shape = ShapeKind::kCircle;
    read_clause(e.anchor_size, e.anchor_color, anchor_shape);
    e.anchor_shape = anchor_shape;
  }
  if (i != tokens.size()) throw std::invalid_argument("parse_expression: trailing tokens");
  return e;
}

std::vector<int> satisfying_objects(const std::vector<ObjectSpec>& objects, const Expression& e) {
  std::vector<int> out;
  for (size_t k = 0; k < objects.size(); ++k) {
    const ObjectSpec& o = objects[k];
    if (!matches_clause(o, e.size, e.color, e.shape)) continue;
    if (e.rel != Expression::Rel::kNone) {
      bool ok = false;
      for (size_t j = 0; j < objects.size(); ++j) {
        if (j == k) continue;
        const ObjectSpec& a = objects[j];
        if (!matches_clause(a, e.anchor_size, e.anchor_color, e.anchor_shape)) continue;
        switch (e.rel) {
          case Expression::Rel::kLeftOf: ok = o.box.cx() < a.box.cx(); break;
          case Expression::Rel::kRightOf: ok = o.box.cx() > a.box.cx(); break;
          case Expression::Rel::kAbove: ok = o.box.cy() < a.box.cy(); break;
          case Expression::Rel::kBelow: ok = o.box.cy() > a.box.cy(); break;
          case Expression::Rel::kNone: break;
        }
        if (ok) break;
      }
      if (!ok) continue;
    }
    out.push_back(int(k));
  }
  return out;
}

namespace {

struct Placement {
  ShapeKind shape;
  int color;
  SizeKind size;
  double cx, cy, r;  // pixel units
  PixelBox bbox;
};

// Rasterizes one object into a mask and its tight pixel box. Returns false
// when the mask came out empty (cannot happen for the radius ranges used).
bool rasterize(const Placement& p, int H, int W, std::vector<uint8_t>& mask, PixelBox& tight) {
  mask.assign(size_t(H) * W, 0);
  int x0 = W, y0 = H, x1 = -1, y1 = -1;
  const int px0 = std::max(0, int(std::floor(p.cx - p.r - 1)));
  const int px1 = std::min(W - 1, int(std::ceil(p.cx + p.r + 1)));
  const int py0 = std::max(0, int(std::floor(p.cy - p.r - 1)));
  const int py1 = std::min(H - 1, int(std::ceil(p.cy + p.r + 1)));
  for (int y = py0; y <= py1; ++y)
    for (int x = px0; x <= px1; ++x)
      if (inside_shape(p.shape, x + 0.5, y + 0.5, p.cx, p.cy, p.r)) {
        mask[size_t(y) * W + x] = 1;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return false;
  tight = {x0, y0, x1, y1};
  return true;
}

bool boxes_touch(const PixelBox& a, const PixelBox& b, int gap) {
  return !(a.x1 + gap < b.x0 || b.x1 + gap < a.x0 || a.y1 + gap < b.y0 || b.y1 + gap < a.y0);
}

struct ExprCandidate {
  bool use_size, use_color, use_rel;
};

std::vector<std::string> render_expression(const ObjectSpec& target, const ObjectSpec* anchor,
                                           Expression::Rel rel, bool use_size, bool use_color) {
  std::vector<std::string> t = {"the"};
  if (use_size) t.push_back(size_name(target.size));
  if (use_color) t.push_back(kColorNames[size_t(target.color)]);
  t.push_back(shape_name(target.shape));
  if (anchor) {
    switch (rel) {
      case Expression::Rel::kLeftOf: t.insert(t.end(), {"left", "of"}); break;
      case Expression::Rel::kRightOf: t.insert(t.end(), {"right", "of"}); break;
      case Expression::Rel::kAbove: t.push_back("above"); break;
      case Expression::Rel::kBelow: t.push_back("below"); break;
      case Expression::Rel::kNone: break;
    }
    t.push_back("the");
    t.push_back(size_name(anchor->size));
    t.push_back(kColorNames[size_t(anchor->color)]);
    t.push_back(shape_name(anchor->shape));
  }
  return t;
}

void validate_config(const SceneConfig& cfg) {
  auto bad = [](const std::string& m) { throw std::invalid_argument("SceneConfig: " + m); };
  if (cfg.height % 32 != 0 || cfg.width % 32 != 0) bad("height/width must be divisible by 32");
  if (cfg.min_objects < 2 || cfg.max_objects > 6 || cfg.min_objects > cfg.max_objects)
    bad("object count must satisfy 2 <= min <= max <= 6");
  if (cfg.n_colors < 1 || cfg.n_colors > 8) bad("n_colors in [1, 8]");
  if (cfg.n_shapes < 1 || cfg.n_shapes > 3) bad("n_shapes in [1, 3]");
  if (cfg.n_sizes < 1 || cfg.n_sizes > 2) bad("n_sizes in [1, 2]");
}

}  // namespace

SceneRecord generate_scene(int id, uint64_t seed, const SceneConfig& cfg,
                           const DetectorNoiseConfig& noise, const std::string& split) {
  validate_config(cfg);
  Rng scene_rng = Rng(seed).child(uint64_t(id) + 1);
  const int H = cfg.height, W = cfg.width;

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Rng rng = scene_rng.child(uint64_t(attempt));
    const int n = cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
    const int target = rng.uniform_int(n);

    // Attribute tuples; one forced distractor shares shape or color with the
    // target so the expression cannot be trivially resolved.
    std::vector<Placement> placements(static_cast<size_t>(n));
    for (auto& p : placements) {
      p.shape = ShapeKind(rng.uniform_int(cfg.n_shapes));
      p.color = rng.uniform_int(cfg.n_colors);
      p.size = SizeKind(rng.uniform_int(cfg.n_sizes));
    }
    if (n >= 2) {
      int j = rng.uniform_int(n - 1);
      if (j >= target) ++j;
      if (rng.uniform() < 0.5)
        placements[size_t(j)].shape = placements[size_t(target)].shape;
      else
        placements[size_t(j)].color = placements[size_t(target)].color;
    }

    // Spatial placement with non-overlapping pixel boxes (1 px gap keeps
    // masks disjoint).
    bool placed_all = true;
    std::vector<std::vector<uint8_t>> masks(static_cast<size_t>(n));
    std::vector<PixelBox> tights(static_cast<size_t>(n));
    for (int k = 0; k < n && placed_all; ++k) {
      Placement& p = placements[size_t(k)];
      bool ok = false;
      for (int t = 0; t < 50 && !ok; ++t) {
        const double scale = double(std::min(H, W)) / 64.0;
        p.r = (p.size == SizeKind::kSmall ? rng.uniform(5.0, 8.0) : rng.uniform(10.0, 14.0)) * scale;
        p.cx = rng.uniform(p.r + 1.0, W - p.r - 1.0);
        p.cy = rng.uniform(p.r + 1.0, H - p.r - 1.0);
        if (!rasterize(p, H, W, masks[size_t(k)], tights[size_t(k)])) continue;
        ok = true;
        for (int j = 0; j < k; ++j)
          if (boxes_touch(tights[size_t(k)], tights[size_t(j)], 1)) {
            ok = false;
            break;
          }
        p.bbox = tights[size_t(k)];
      }
      placed_all = ok;
    }
    if (!placed_all) continue;

    SceneRecord rec;
    rec.id = id;
    rec.split = split;
    rec.height = H;
    rec.width = W;
    rec.target_index = target;
    rec.objects.resize(size_t(n));
    for (int k = 0; k < n; ++k) {
      ObjectSpec& o = rec.objects[size_t(k)];
      o.shape = placements[size_t(k)].shape;
      o.color = placements[size_t(k)].color;
      o.size = placements[size_t(k)].size;
      o.mask = std::move(masks[size_t(k)]);
      const PixelBox& t = tights[size_t(k)];
      o.box = Box::corners_normalized(double(t.x0) / W, double(t.y0) / H, double(t.x1 + 1) / W,
                                      double(t.y1 + 1) / H);
    }

    // Candidate expression templates in random order; first uniquely
    // satisfied one wins.
    std::vector<ExprCandidate> cands;
    for (bool use_rel : {false, true}) {
      if (use_rel && (!cfg.allow_relations || n < 2)) continue;
      for (bool use_size : {false, true})
        for (bool use_color : {false, true}) cands.push_back({use_size, use_color, use_rel});
    }
    for (size_t i = cands.size(); i > 1; --i) std::swap(cands[i - 1], cands[size_t(rng.uniform_int(int(i)))]);

    bool found = false;
    for (const auto& cand : cands) {
      const ObjectSpec* anchor = nullptr;
      Expression::Rel rel = Expression::Rel::kNone;
      if (cand.use_rel) {
        // Pick a random relation against another object that actually stands
        // in that relation to the target.
        std::vector<std::pair<int, Expression::Rel>> options;
        for (int j = 0; j < n; ++j) {
          if (j == target) continue;
          const auto& tb = rec.objects[size_t(target)].box;
          const auto& ab = rec.objects[size_t(j)].box;
          if (tb.cx() < ab.cx()) options.push_back({j, Expression::Rel::kLeftOf});
          if (tb.cx() > ab.cx()) options.push_back({j, Expression::Rel::kRightOf});
          if (tb.cy() < ab.cy()) options.push_back({j, Expression::Rel::kAbove});
          if (tb.cy() > ab.cy()) options.push_back({j, Expression::Rel::kBelow});
        }
        if (options.empty()) continue;
        const auto& pick = options[size_t(rng.uniform_int(int(options.size())))];
        anchor = &rec.objects[size_t(pick.first)];
        rel = pick.second;
      }
      auto tokens = render_expression(rec.objects[size_t(target)], anchor, rel, cand.use_size,
                                      cand.use_color);
      const auto sat = satisfying_objects(rec.objects, parse_expression(tokens));
      if (sat.size() == 1 && sat[0] == target) {
        rec.tokens = std::move(tokens);
        found = true;
        break;
      }
    }
    if (!found) continue;

    rec.token_ids.clear();
    for (auto& t : rec.tokens) rec.token_ids.push_back(token_id(t));

    // Render image: dim textured background, solid shapes.
    rec.image.assign(size_t(H) * W * 3, 0.0f);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float bg = 0.06f + 0.04f * float(rng.uniform());
        for (int c = 0; c < 3; ++c) rec.image[(size_t(y) * W + x) * 3 + c] = bg;
      }
    for (const auto& o : rec.objects) {
      const float* rgb = color_rgb(o.color);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (o.mask[size_t(y) * W + x])
            for (int c = 0; c < 3; ++c) rec.image[(size_t(y) * W + x) * 3 + c] = rgb[c];
    }

    Rng det_rng = scene_rng.child(0x9e3779b9ULL);
    rec.detections = oracle_detect(rec, noise, det_rng);
    return rec;
  }
  throw std::runtime_error(
      "generate_scene: could not build a uniquely-referring scene within the resampling budget; "
      "the configuration is too restrictive (scene id " + std::to_string(id) + ")");
}

std::vector<SceneRecord> generate_dataset(int n_scenes, uint64_t seed, const SceneConfig& cfg,
                                          const DetectorNoiseConfig& noise, const std::string& split,
                                          int id_offset) {
  if (n_scenes < 1) throw std::invalid_argument("generate_dataset: n_scenes must be >= 1");
  std::vector<SceneRecord> out;
  out.reserve(size_t(n_scenes));
  for (int i = 0; i < n_scenes; ++i)
    out.push_back(generate_scene(id_offset + i, seed, cfg, noise, split));
  return out;
}

std::vector<PriorSample> oracle_detect(const SceneRecord& scene, const DetectorNoiseConfig& noise,
                                       pcan::Rng& rng) {
  ++g_oracle_calls;
  const Expression e = parse_expression(scene.tokens);
  std::vector<PriorSample> out;
  for (size_t k = 0; k < scene.objects.size(); ++k) {
    const ObjectSpec& o = scene.objects[k];
    // Relevance: the object shares any attribute word with the expression.
    bool relevant = int(k) == scene.target_index;
    relevant = relevant || o.shape == e.shape || (e.anchor_shape && o.shape == *e.anchor_shape);
    if (e.color) relevant = relevant || o.color == *e.color;
    if (e.anchor_color) relevant = relevant || o.color == *e.anchor_color;
    if (e.size) relevant = relevant || o.size == *e.size;
    if (e.anchor_size) relevant = relevant || o.size == *e.anchor_size;
    if (!relevant) continue;
    if (int(out.size()) >= noise.max_detections) break;
    const Box jittered = geometry::perturb(o.box, noise.box_jitter, rng);
    const double conf = rng.truncated_normal(noise.confidence_mean, noise.confidence_sd, 0.0, 1.0);
    out.emplace_back(jittered, conf, PriorLabel::kNegativeDetected);
  }
  return out;
}

int64_t oracle_detect_call_count() { return g_oracle_calls.load(); }

namespace {

std::string scene_file(const std::string& dir, int index, const char* kind) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "scene_%06d.%s.bin", index, kind);
  return dir + "/" + buf;
}

}  // namespace

void save_split(const std::string& dir, const std::string& split,
                const std::vector<SceneRecord>& scenes) {
  const std::string sdir = dir + "/" + split;
  fs::create_directories(sdir);
  std::ofstream jl(sdir + "/scenes.jsonl");
  if (!jl) throw std::runtime_error("save_split: cannot open " + sdir + "/scenes.jsonl");
  for (size_t i = 0; i < scenes.size(); ++i) {
    const SceneRecord& s = scenes[i];
    ordered_json rec;
    rec["id"] = s.id;
    rec["split"] = s.split;
    rec["height"] = s.height;
    rec["width"] = s.width;
    rec["tokens"] = s.tokens;
    rec["target_index"] = s.target_index;
    rec["objects"] = ordered_json::array();
    for (const auto& o : s.objects) {
      ordered_json jo;
      jo["shape"] = shape_name(o.shape);
      jo["color"] = kColorNames[size_t(o.color)];
      jo["size"] = size_name(o.size);
      jo["box"] = {o.box.x1(), o.box.y1(), o.box.x2(), o.box.y2()};
      rec["objects"].push_back(jo);
    }
    rec["detections"] = ordered_json::array();
    for (const auto& d : s.detections) {
      ordered_json jd;
      jd["box"] = {d.box.x1(), d.box.y1(), d.box.x2(), d.box.y2()};
      jd["confidence"] = d.confidence;
      jd["label"] = to_string(d.label);
      rec["detections"].push_back(jd);
    }
    jl << rec.dump() << "\n";

    imageio::write_pcn1(scene_file(sdir, int(i), "img"), s.height, s.width, 3, s.image);
    std::vector<float> mk(size_t(s.height) * s.width * s.objects.size());
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        for (size_t c = 0; c < s.objects.size(); ++c)
          mk[(size_t(y) * s.width + x) * s.objects.size() + c] =
              float(s.objects[c].mask[size_t(y) * s.width + x]);
    imageio::write_pcn1(scene_file(sdir, int(i), "masks"), s.height, s.width, int(s.objects.size()), mk);
  }
}

std::vector<SceneRecord> load_split(const std::string& dir, const std::string& split) {
  const std::string sdir = dir + "/" + split;
  std::ifstream jl(sdir + "/scenes.jsonl");
  if (!jl) throw std::runtime_error("load_split: cannot open " + sdir + "/scenes.jsonl");
  std::vector<SceneRecord> out;
  std::string line;
  int index = 0;
  while (std::getline(jl, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    SceneRecord s;
    s.id = rec.at("id").get<int>();
    s.split = rec.at("split").get<std::string>();
    s.height = rec.at("height").get<int>();
    s.width = rec.at("width").get<int>();
    s.tokens = rec.at("tokens").get<std::vector<std::string>>();
    for (auto& t : s.tokens) s.token_ids.push_back(token_id(t));
    s.target_index = rec.at("target_index").get<int>();

    int h = 0, w = 0, c = 0;
    s.image = imageio::read_pcn1(scene_file(sdir, index, "img"), h, w, c);
    if (h != s.height || w != s.width || c != 3)
      throw std::runtime_error("load_split: image dims mismatch for scene " + std::to_string(s.id));
    const auto masks = imageio::read_pcn1(scene_file(sdir, index, "masks"), h, w, c);
    const auto& jobjects = rec.at("objects");
    if (size_t(c) != jobjects.size())
      throw std::runtime_error("load_split: mask channels mismatch for scene " + std::to_string(s.id));

    for (size_t ci = 0; ci < jobjects.size(); ++ci) {
      const auto& jo = jobjects[ci];
      ObjectSpec o;
      o.shape = *parse_shape(jo.at("shape").get<std::string>());
      o.color = *parse_color(jo.at("color").get<std::string>());
      o.size = *parse_size(jo.at("size").get<std::string>());
      const auto b = jo.at("box").get<std::vector<double>>();
      o.box = Box::corners_normalized(b[0], b[1], b[2], b[3]);
      o.mask.resize(size_t(s.height) * s.width);
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
          o.mask[size_t(y) * s.width + x] =
              masks[(size_t(y) * s.width + x) * size_t(c) + ci] > 0.5f ? 1 : 0;
      s.objects.push_back(std::move(o));
    }

    for (const auto& jd : rec.at("detections")) {
      const auto b = jd.at("box").get<std::vector<double>>();
      s.detections.emplace_back(Box::corners_normalized(b[0], b[1], b[2], b[3]),
                                jd.at("confidence").get<double>(),
                                prior_label_from_string(jd.at("label").get<std::string>()));
    }
    out.push_back(std::move(s));
    ++index;
  }
  return out;
}

}  // namespace pcan::synthdata
