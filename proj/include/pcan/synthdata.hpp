#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pcan/geometry.hpp"
#include "pcan/rng.hpp"

namespace pcan::synthdata {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class SizeKind { kSmall, kLarge };

const std::vector<std::string>& color_names();  // 8-color palette
const float* color_rgb(int color);              // 3 floats in [0,1]
const char* shape_name(ShapeKind s);
const char* size_name(SizeKind s);

// Fixed token table (<= 64 entries). Throws on unknown words.
const std::vector<std::string>& vocabulary();
int token_id(const std::string& word);

struct ObjectSpec {
  ShapeKind shape;
  int color;  // palette index
  SizeKind size;
  geometry::Box box;           // corner-normalized, tight around the mask
  std::vector<uint8_t> mask;   // H*W, values 0/1

  ObjectSpec() : shape(ShapeKind::kCircle), color(0), size(SizeKind::kSmall),
                 box(geometry::Box::corners_normalized(0, 0, 1, 1)) {}
};

enum class PriorLabel { kPositive, kNegativeDetected, kNegativeSynthetic };

const char* to_string(PriorLabel l);
PriorLabel prior_label_from_string(const std::string& s);

// A box plus detector confidence plus role label; the currency of the
// position-aware sampling stage. Synthetic samples carry confidence 0.
struct PriorSample {
  geometry::Box box;  // corner-normalized
  double confidence;
  PriorLabel label;

  PriorSample(geometry::Box b, double conf, PriorLabel lab) : box(b), confidence(conf), label(lab) {}
};

struct SceneRecord {
  int id = 0;
  std::string split = "train";
  int height = 0, width = 0;
  std::vector<float> image;  // row-major [y][x][3], values in [0,1]
  std::vector<ObjectSpec> objects;
  std::vector<std::string> tokens;
  std::vector<int> token_ids;
  int target_index = 0;
  std::vector<PriorSample> detections;  // oracle detector output, stored with the scene

  const ObjectSpec& target() const { return objects[size_t(target_index)]; }
};

struct SceneConfig {
  int height = 64;
  int width = 64;
  int min_objects = 2;
  int max_objects = 6;
  int n_colors = 8;  // first n of the palette
  int n_shapes = 3;
  int n_sizes = 2;
  bool allow_relations = true;
  int max_attempts = 64;  // per-scene resampling budget for the uniqueness constraint
};

struct DetectorNoiseConfig {
  double box_jitter = 0.1;  // uniform shift, fraction of the box side
  double confidence_mean = 0.8;
  double confidence_sd = 0.1;
  int max_detections = 10;
};

// Structured form of a referring expression. Relation semantics: the head
// object satisfies "left of"/"right of" when its center-x is strictly less/
// greater than the center-x of SOME object matching the anchor clause;
// "above"/"below" compare center-y (y grows downward).
struct Expression {
  enum class Rel { kNone, kLeftOf, kRightOf, kAbove, kBelow };
  std::optional<SizeKind> size;
  std::optional<int> color;
  ShapeKind shape = ShapeKind::kCircle;
  Rel rel = Rel::kNone;
  std::optional<SizeKind> anchor_size;
  std::optional<int> anchor_color;
  std::optional<ShapeKind> anchor_shape;
};

Expression parse_expression(const std::vector<std::string>& tokens);
std::vector<int> satisfying_objects(const std::vector<ObjectSpec>& objects, const Expression& expr);

/// Deterministic scene generation. Each scene derives its own random stream
/// from (seed, id), so results are independent of generation order.
SceneRecord generate_scene(int id, uint64_t seed, const SceneConfig& cfg,
                           const DetectorNoiseConfig& noise, const std::string& split);

std::vector<SceneRecord> generate_dataset(int n_scenes, uint64_t seed, const SceneConfig& cfg,
                                          const DetectorNoiseConfig& noise = {},
                                          const std::string& split = "train", int id_offset = 0);

/// Oracle stand-in for a grounded detector: one jittered box per
/// expression-relevant object (sharing any attribute word with the
/// expression), confidences from a truncated normal.
std::vector<PriorSample> oracle_detect(const SceneRecord& scene, const DetectorNoiseConfig& noise,
                                       pcan::Rng& rng);

/// Number of oracle_detect calls made so far in this process; the inference
/// path is required to leave this untouched.
int64_t oracle_detect_call_count();

// On-disk format: <dir>/<split>/scenes.jsonl plus per-scene PCN1 arrays
// (scene_%06d.img.bin with 3 channels, scene_%06d.masks.bin with one channel
// per object).
void save_split(const std::string& dir, const std::string& split,
                const std::vector<SceneRecord>& scenes);
std::vector<SceneRecord> load_split(const std::string& dir, const std::string& split);

}  // namespace pcan::synthdata
