#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attbalance/kv.hpp"
#include "attbalance/sample.hpp"

namespace attbalance {

// Closed vocabulary with a fixed layout: padding, shapes, colors, sizes,
// relations. Expressions are [size?] [color?] shape [relation landmark]?.
namespace vocab {

inline constexpr int kPad = 0;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 4;
inline constexpr int kNumSizes = 2;
inline constexpr int kNumRelations = 4;  // left-of, right-of, above, below

inline constexpr int shape_word(int shape) { return 1 + shape; }
inline constexpr int color_word(int color) { return 1 + kNumShapes + color; }
inline constexpr int size_word(int size) { return 1 + kNumShapes + kNumColors + size; }
inline constexpr int relation_word(int rel) {
  return 1 + kNumShapes + kNumColors + kNumSizes + rel;
}
inline constexpr int size() {
  return 1 + kNumShapes + kNumColors + kNumSizes + kNumRelations;
}

bool is_shape_word(int id);
bool is_color_word(int id);
bool is_size_word(int id);
bool is_relation_word(int id);
std::string word_name(int id);

// Per-cell feature layout: occupancy flag, then shape/color/size one-hots.
inline constexpr int feature_dim() { return 1 + kNumShapes + kNumColors + kNumSizes; }

}  // namespace vocab

// Axis-aligned object on the cell grid, inclusive cell bounds.
struct SceneObject {
  int shape = 0;
  int color = 0;
  int size = 0;
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;

  bool overlaps(const SceneObject& other) const;
};

struct SceneInfo {
  std::vector<SceneObject> objects;
  int target = 0;
  bool has_relation = false;
};

// Attribute constraints plus an optional relation clause.
struct ParsedExpression {
  int size = -1;
  int color = -1;
  int shape = -1;
  int relation = -1;
  int landmark_shape = -1;
};

ParsedExpression parse_expression(const std::vector<int>& tokens);

bool relation_holds(const SceneObject& a, int relation, const SceneObject& b);

// Exhaustive matcher: indices of all objects the expression denotes.
std::vector<int> match_expression(const std::vector<SceneObject>& objects,
                                  const std::vector<int>& tokens);

enum class DatasetFormat : std::uint8_t { kJsonl = 0, kBinary = 1 };

struct DatasetConfig {
  int n_train = 512;
  int n_val = 128;
  int grid_h = 8;
  int grid_w = 8;
  int min_objects = 2;
  int max_objects = 4;
  bool distractors_share_attributes = true;
  double relation_fraction = 0.35;
  double box_ratio_min = 0.02;
  double box_ratio_max = 0.25;
  double noise_sigma = 0.1;
  std::uint64_t seed = 1234;
  bool crop_augment = false;
  DatasetFormat file_format = DatasetFormat::kJsonl;

  void validate() const;
};

struct Dataset {
  DatasetConfig config;
  std::vector<GroundingSample> train;
  std::vector<GroundingSample> val;
};

// Deterministic in the config; every sample's expression denotes exactly one
// object (enforced with the matcher above). Throws ConfigError when the
// config cannot be satisfied.
Dataset generate(const DatasetConfig& cfg);

// Scene behind a generated sample, regenerated deterministically. For
// inspection and tests; forward passes never see object lists.
SceneInfo scene_for(const DatasetConfig& cfg, Split split, std::uint64_t index);

// Ground-truth-preserving random crop: the window always contains the full
// gt box; the grid is re-rendered to full resolution by nearest neighbor.
GroundingSample augment_crop(const GroundingSample& sample, std::uint64_t seed);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

KvPairs dataset_config_kv(const DatasetConfig& c);
bool apply_dataset_config_kv(DatasetConfig& c, const std::string& key, const std::string& value);

}  // namespace attbalance
