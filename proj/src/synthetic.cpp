#include "attbalance/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "attbalance/binio.hpp"
#include "attbalance/errors.hpp"
#include "attbalance/kv.hpp"
#include "attbalance/rng.hpp"

namespace attbalance {

namespace vocab {

bool is_shape_word(int id) { return id >= 1 && id < 1 + kNumShapes; }
bool is_color_word(int id) {
  return id >= 1 + kNumShapes && id < 1 + kNumShapes + kNumColors;
}
bool is_size_word(int id) {
  return id >= 1 + kNumShapes + kNumColors && id < 1 + kNumShapes + kNumColors + kNumSizes;
}
bool is_relation_word(int id) {
  return id >= 1 + kNumShapes + kNumColors + kNumSizes && id < size();
}

std::string word_name(int id) {
  static const char* kShapes[] = {"circle", "square", "triangle"};
  static const char* kColors[] = {"red", "green", "blue", "yellow"};
  static const char* kSizes[] = {"small", "big"};
  static const char* kRelations[] = {"left-of", "right-of", "above", "below"};
  if (id == kPad) return "<pad>";
  if (is_shape_word(id)) return kShapes[id - 1];
  if (is_color_word(id)) return kColors[id - 1 - kNumShapes];
  if (is_size_word(id)) return kSizes[id - 1 - kNumShapes - kNumColors];
  if (is_relation_word(id)) return kRelations[id - 1 - kNumShapes - kNumColors - kNumSizes];
  throw ContractError("word_name: unknown token id " + std::to_string(id));
}

}  // namespace vocab

bool SceneObject::overlaps(const SceneObject& other) const {
  return !(c1 < other.c0 || other.c1 < c0 || r1 < other.r0 || other.r1 < r0);
}

ParsedExpression parse_expression(const std::vector<int>& tokens) {
  ParsedExpression e;
  std::size_t i = 0;
  const auto at = [&](std::size_t idx) { return idx < tokens.size() ? tokens[idx] : vocab::kPad; };
  if (vocab::is_size_word(at(i))) {
    e.size = at(i) - 1 - vocab::kNumShapes - vocab::kNumColors;
    ++i;
  }
  if (vocab::is_color_word(at(i))) {
    e.color = at(i) - 1 - vocab::kNumShapes;
    ++i;
  }
  if (!vocab::is_shape_word(at(i))) {
    throw ContractError("parse_expression: expected a shape word at position " +
                        std::to_string(i));
  }
  e.shape = at(i) - 1;
  ++i;
  if (i < tokens.size() && tokens[i] != vocab::kPad) {
    if (!vocab::is_relation_word(at(i))) {
      throw ContractError("parse_expression: expected a relation word at position " +
                          std::to_string(i));
    }
    e.relation = at(i) - 1 - vocab::kNumShapes - vocab::kNumColors - vocab::kNumSizes;
    ++i;
    if (!vocab::is_shape_word(at(i))) {
      throw ContractError("parse_expression: relation clause needs a landmark shape");
    }
    e.landmark_shape = at(i) - 1;
    ++i;
  }
  for (; i < tokens.size(); ++i) {
    if (tokens[i] != vocab::kPad) {
      throw ContractError("parse_expression: trailing tokens after the expression");
    }
  }
  return e;
}

bool relation_holds(const SceneObject& a, int relation, const SceneObject& b) {
  switch (relation) {
    case 0: return a.c1 < b.c0;  // strictly left of
    case 1: return a.c0 > b.c1;  // strictly right of
    case 2: return a.r1 < b.r0;  // strictly above
    case 3: return a.r0 > b.r1;  // strictly below
    default: throw ContractError("relation_holds: unknown relation " + std::to_string(relation));
  }
}

std::vector<int> match_expression(const std::vector<SceneObject>& objects,
                                  const std::vector<int>& tokens) {
  const ParsedExpression e = parse_expression(tokens);
  std::vector<int> matches;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const SceneObject& obj = objects[i];
    if (obj.shape != e.shape) continue;
    if (e.color >= 0 && obj.color != e.color) continue;
    if (e.size >= 0 && obj.size != e.size) continue;
    if (e.relation >= 0) {
      bool supported = false;
      for (std::size_t j = 0; j < objects.size() && !supported; ++j) {
        if (j == i) continue;
        if (objects[j].shape == e.landmark_shape &&
            relation_holds(obj, e.relation, objects[j])) {
          supported = true;
        }
      }
      if (!supported) continue;
    }
    matches.push_back(static_cast<int>(i));
  }
  return matches;
}

void DatasetConfig::validate() const {
  if (n_train < 1 || n_val < 1) throw ConfigError("dataset needs n_train >= 1 and n_val >= 1");
  if (grid_h < 1 || grid_w < 1) throw ConfigError("dataset grid must be at least 1x1");
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("object count range invalid: [" + std::to_string(min_objects) + ", " +
                      std::to_string(max_objects) + "]");
  }
  if (max_objects > grid_h * grid_w) {
    throw ConfigError("object count " + std::to_string(max_objects) +
                      " exceeds grid capacity " + std::to_string(grid_h * grid_w));
  }
  if (!(relation_fraction >= 0.0 && relation_fraction <= 1.0)) {
    throw ConfigError("relation_fraction must lie in [0, 1]");
  }
  if (!(box_ratio_min > 0.0 && box_ratio_min <= box_ratio_max && box_ratio_max <= 1.0)) {
    throw ConfigError("box ratio range invalid");
  }
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  // Some integer cell rectangle must land in the ratio range.
  const int cells = grid_h * grid_w;
  bool feasible = false;
  for (int hc = 1; hc <= grid_h && !feasible; ++hc) {
    for (int wc = 1; wc <= grid_w && !feasible; ++wc) {
      const double ratio = static_cast<double>(wc * hc) / cells;
      feasible = ratio >= box_ratio_min && ratio <= box_ratio_max;
    }
  }
  if (!feasible) {
    throw ConfigError("no cell rectangle fits the box ratio range [" +
                      format_double(box_ratio_min) + ", " + format_double(box_ratio_max) + "]");
  }
}

namespace {

constexpr int kSceneRetries = 200;
constexpr int kPlacementRetries = 64;

Rng sample_stream(const DatasetConfig& cfg, Split split, std::uint64_t index) {
  return Rng(cfg.seed).substream("data").substream(
      split == Split::kTrain ? "train-sample" : "val-sample", index);
}

bool place_objects(const DatasetConfig& cfg, Rng& rng, int count,
                   std::vector<SceneObject>& out) {
  out.clear();
  const int cells = cfg.grid_h * cfg.grid_w;
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      const int wc = rng.uniform_int(1, cfg.grid_w);
      const int hc = rng.uniform_int(1, cfg.grid_h);
      const double ratio = static_cast<double>(wc * hc) / cells;
      if (ratio < cfg.box_ratio_min || ratio > cfg.box_ratio_max) continue;
      SceneObject obj;
      obj.r0 = rng.uniform_int(0, cfg.grid_h - hc);
      obj.c0 = rng.uniform_int(0, cfg.grid_w - wc);
      obj.r1 = obj.r0 + hc - 1;
      obj.c1 = obj.c0 + wc - 1;
      bool clash = false;
      for (const auto& o : out) clash = clash || obj.overlaps(o);
      if (clash) continue;
      out.push_back(obj);
      placed = true;
    }
    if (!placed) return false;
  }
  return true;
}

int random_other(Rng& rng, int count, int avoid) {
  int v = rng.uniform_int(0, count - 2);
  if (v >= avoid) ++v;
  return v;
}

struct BuiltScene {
  SceneInfo scene;
  std::vector<int> tokens;
};

// One attempt at a scene + expression; empty tokens signal failure.
BuiltScene try_build(const DatasetConfig& cfg, Rng& rng) {
  BuiltScene built;
  const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  if (!place_objects(cfg, rng, count, built.scene.objects)) return built;
  auto& objects = built.scene.objects;

  SceneObject& target = objects[0];
  target.shape = rng.uniform_int(0, vocab::kNumShapes - 1);
  target.color = rng.uniform_int(0, vocab::kNumColors - 1);
  target.size = rng.uniform_int(0, vocab::kNumSizes - 1);
  built.scene.target = 0;

  const bool relation_sample = count >= 2 && rng.uniform() < cfg.relation_fraction;
  built.scene.has_relation = relation_sample;

  for (int i = 1; i < count; ++i) {
    SceneObject& obj = objects[static_cast<std::size_t>(i)];
    if (relation_sample && i == 1) {
      // Twin: attribute words alone cannot separate it from the target.
      obj.shape = target.shape;
      obj.color = target.color;
      obj.size = target.size;
      continue;
    }
    if (cfg.distractors_share_attributes) {
      obj.shape = target.shape;
      obj.color = target.color;
      obj.size = target.size;
      const int differ = rng.uniform_int(1, 7);  // non-empty subset of attributes
      if (differ & 1) obj.shape = random_other(rng, vocab::kNumShapes, target.shape);
      if (differ & 2) obj.color = random_other(rng, vocab::kNumColors, target.color);
      if (differ & 4) obj.size = random_other(rng, vocab::kNumSizes, target.size);
    } else {
      obj.shape = rng.uniform_int(0, vocab::kNumShapes - 1);
      obj.color = rng.uniform_int(0, vocab::kNumColors - 1);
      obj.size = rng.uniform_int(0, vocab::kNumSizes - 1);
    }
  }

  // Smallest attribute prefix that isolates the target, widening as needed.
  bool need_color = false;
  bool need_size = false;
  for (int i = 1; i < count; ++i) {
    const SceneObject& obj = objects[static_cast<std::size_t>(i)];
    if (obj.shape != target.shape) continue;
    need_color = true;
    if (obj.color == target.color) need_size = true;
  }
  std::vector<int> tokens;
  if (need_size) tokens.push_back(vocab::size_word(target.size));
  if (need_color || need_size) tokens.push_back(vocab::color_word(target.color));
  tokens.push_back(vocab::shape_word(target.shape));

  if (relation_sample) {
    // Try relation/landmark pairs in random order until one is unique.
    std::vector<std::pair<int, int>> options;
    for (int rel = 0; rel < vocab::kNumRelations; ++rel) {
      for (int j = 1; j < count; ++j) {
        if (relation_holds(target, rel, objects[static_cast<std::size_t>(j)])) {
          options.emplace_back(rel, objects[static_cast<std::size_t>(j)].shape);
        }
      }
    }
    rng.shuffle(options);
    for (const auto& [rel, landmark_shape] : options) {
      std::vector<int> candidate = tokens;
      candidate.push_back(vocab::relation_word(rel));
      candidate.push_back(vocab::shape_word(landmark_shape));
      const auto matches = match_expression(objects, candidate);
      if (matches.size() == 1 && matches[0] == 0) {
        built.tokens = std::move(candidate);
        return built;
      }
    }
    built.tokens.clear();  // no unique relation clause found
    return built;
  }

  const auto matches = match_expression(objects, tokens);
  if (matches.size() == 1 && matches[0] == 0) built.tokens = std::move(tokens);
  return built;
}

BuiltScene build_scene(const DatasetConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < kSceneRetries; ++attempt) {
    BuiltScene built = try_build(cfg, rng);
    if (!built.tokens.empty()) return built;
  }
  throw ConfigError("generate: could not satisfy dataset config within " +
                    std::to_string(kSceneRetries) + " attempts per sample");
}

GroundingSample render_sample(const DatasetConfig& cfg, const BuiltScene& built, Rng& rng,
                              std::uint64_t id, Split split) {
  GroundingSample s;
  s.id = id;
  s.split = split;
  s.grid_h = cfg.grid_h;
  s.grid_w = cfg.grid_w;
  s.feature_dim = vocab::feature_dim();
  const int cells = cfg.grid_h * cfg.grid_w;
  s.features.assign(static_cast<std::size_t>(cells) * vocab::feature_dim(), 0.0);
  for (const auto& obj : built.scene.objects) {
    for (int r = obj.r0; r <= obj.r1; ++r) {
      for (int c = obj.c0; c <= obj.c1; ++c) {
        const std::size_t base =
            (static_cast<std::size_t>(r) * cfg.grid_w + c) * vocab::feature_dim();
        s.features[base] = 1.0;
        s.features[base + 1 + obj.shape] = 1.0;
        s.features[base + 1 + vocab::kNumShapes + obj.color] = 1.0;
        s.features[base + 1 + vocab::kNumShapes + vocab::kNumColors + obj.size] = 1.0;
      }
    }
  }
  if (cfg.noise_sigma > 0.0) {
    for (auto& f : s.features) f += rng.normal(0.0, cfg.noise_sigma);
  }
  s.tokens = built.tokens;
  const SceneObject& target = built.scene.objects[static_cast<std::size_t>(built.scene.target)];
  s.box = from_corners({static_cast<double>(target.c0) / cfg.grid_w,
                        static_cast<double>(target.r0) / cfg.grid_h,
                        static_cast<double>(target.c1 + 1) / cfg.grid_w,
                        static_cast<double>(target.r1 + 1) / cfg.grid_h});
  return s;
}

GroundingSample make_sample(const DatasetConfig& cfg, Split split, std::uint64_t index,
                            std::uint64_t id) {
  Rng rng = sample_stream(cfg, split, index);
  const BuiltScene built = build_scene(cfg, rng);
  return render_sample(cfg, built, rng, id, split);
}

}  // namespace

Dataset generate(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.train.reserve(static_cast<std::size_t>(cfg.n_train));
  ds.val.reserve(static_cast<std::size_t>(cfg.n_val));
  for (int i = 0; i < cfg.n_train; ++i) {
    ds.train.push_back(make_sample(cfg, Split::kTrain, static_cast<std::uint64_t>(i),
                                   static_cast<std::uint64_t>(i)));
  }
  for (int j = 0; j < cfg.n_val; ++j) {
    ds.val.push_back(make_sample(cfg, Split::kVal, static_cast<std::uint64_t>(j),
                                 static_cast<std::uint64_t>(cfg.n_train + j)));
  }
  return ds;
}

SceneInfo scene_for(const DatasetConfig& cfg, Split split, std::uint64_t index) {
  Rng rng = sample_stream(cfg, split, index);
  return build_scene(cfg, rng).scene;
}

GroundingSample augment_crop(const GroundingSample& sample, std::uint64_t seed) {
  const int grid_h = sample.grid_h;
  const int grid_w = sample.grid_w;
  const CornerBox box = clip_to_unit(to_corners(sample.box));

  // Cell span of the gt box; the crop window must contain it.
  const auto clamp_int = [](int v, int lo, int hi) { return std::min(hi, std::max(lo, v)); };
  const int gr0 = clamp_int(static_cast<int>(std::floor(box.y1 * grid_h)), 0, grid_h - 1);
  const int gr1 = clamp_int(static_cast<int>(std::ceil(box.y2 * grid_h)) - 1, gr0, grid_h - 1);
  const int gc0 = clamp_int(static_cast<int>(std::floor(box.x1 * grid_w)), 0, grid_w - 1);
  const int gc1 = clamp_int(static_cast<int>(std::ceil(box.x2 * grid_w)) - 1, gc0, grid_w - 1);

  Rng rng(seed);
  const int crop_r0 = rng.uniform_int(0, gr0);
  const int crop_r1 = rng.uniform_int(gr1, grid_h - 1);
  const int crop_c0 = rng.uniform_int(0, gc0);
  const int crop_c1 = rng.uniform_int(gc1, grid_w - 1);
  if (crop_r0 == 0 && crop_c0 == 0 && crop_r1 == grid_h - 1 && crop_c1 == grid_w - 1) {
    return sample;  // full-window crop is the identity
  }

  const int ch = crop_r1 - crop_r0 + 1;
  const int cw = crop_c1 - crop_c0 + 1;
  GroundingSample out = sample;
  // Nearest-neighbor re-render of the window back to full resolution.
  for (int r = 0; r < grid_h; ++r) {
    const int src_r = crop_r0 + std::min(ch - 1, static_cast<int>((r + 0.5) * ch / grid_h));
    for (int c = 0; c < grid_w; ++c) {
      const int src_c = crop_c0 + std::min(cw - 1, static_cast<int>((c + 0.5) * cw / grid_w));
      const std::size_t dst =
          (static_cast<std::size_t>(r) * grid_w + c) * static_cast<std::size_t>(sample.feature_dim);
      const std::size_t src = (static_cast<std::size_t>(src_r) * grid_w + src_c) *
                              static_cast<std::size_t>(sample.feature_dim);
      for (int f = 0; f < sample.feature_dim; ++f) out.features[dst + f] = sample.features[src + f];
    }
  }

  // Remap the box into window coordinates.
  const double u0 = static_cast<double>(crop_c0) / grid_w;
  const double u1 = static_cast<double>(crop_c1 + 1) / grid_w;
  const double v0 = static_cast<double>(crop_r0) / grid_h;
  const double v1 = static_cast<double>(crop_r1 + 1) / grid_h;
  out.box = from_corners({(box.x1 - u0) / (u1 - u0), (box.y1 - v0) / (v1 - v0),
                          (box.x2 - u0) / (u1 - u0), (box.y2 - v0) / (v1 - v0)});
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::json;

constexpr char kBinaryMagic[8] = {'A', 'T', 'B', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kDatasetVersion = 1;

std::string format_name(DatasetFormat f) {
  return f == DatasetFormat::kJsonl ? "jsonl" : "binary";
}

DatasetFormat format_from_name(const std::string& name) {
  if (name == "jsonl") return DatasetFormat::kJsonl;
  if (name == "binary") return DatasetFormat::kBinary;
  throw ConfigError("unknown dataset format: " + name);
}

}  // namespace

KvPairs dataset_config_kv(const DatasetConfig& c) {
  return {
      {"n_train", format_int(c.n_train)},
      {"n_val", format_int(c.n_val)},
      {"grid_h", format_int(c.grid_h)},
      {"grid_w", format_int(c.grid_w)},
      {"min_objects", format_int(c.min_objects)},
      {"max_objects", format_int(c.max_objects)},
      {"distractors_share_attributes", format_bool(c.distractors_share_attributes)},
      {"relation_fraction", format_double(c.relation_fraction)},
      {"box_ratio_min", format_double(c.box_ratio_min)},
      {"box_ratio_max", format_double(c.box_ratio_max)},
      {"noise_sigma", format_double(c.noise_sigma)},
      {"seed", format_u64(c.seed)},
      {"crop_augment", format_bool(c.crop_augment)},
      {"file_format", format_name(c.file_format)},
  };
}

bool apply_dataset_config_kv(DatasetConfig& c, const std::string& key, const std::string& value) {
  if (key == "n_train") c.n_train = static_cast<int>(parse_int(value));
  else if (key == "n_val") c.n_val = static_cast<int>(parse_int(value));
  else if (key == "grid_h") c.grid_h = static_cast<int>(parse_int(value));
  else if (key == "grid_w") c.grid_w = static_cast<int>(parse_int(value));
  else if (key == "min_objects") c.min_objects = static_cast<int>(parse_int(value));
  else if (key == "max_objects") c.max_objects = static_cast<int>(parse_int(value));
  else if (key == "distractors_share_attributes")
    c.distractors_share_attributes = parse_bool(value);
  else if (key == "relation_fraction") c.relation_fraction = parse_double(value);
  else if (key == "box_ratio_min") c.box_ratio_min = parse_double(value);
  else if (key == "box_ratio_max") c.box_ratio_max = parse_double(value);
  else if (key == "noise_sigma") c.noise_sigma = parse_double(value);
  else if (key == "seed") c.seed = parse_u64(value);
  else if (key == "crop_augment") c.crop_augment = parse_bool(value);
  else if (key == "file_format") c.file_format = format_from_name(value);
  else return false;
  return true;
}

namespace {

json sample_to_json(const GroundingSample& s) {
  json j;
  j["id"] = s.id;
  j["split"] = split_name(s.split);
  j["grid_h"] = s.grid_h;
  j["grid_w"] = s.grid_w;
  j["feature_dim"] = s.feature_dim;
  j["features"] = s.features;
  j["tokens"] = s.tokens;
  j["box"] = {{"cx", s.box.cx}, {"cy", s.box.cy}, {"w", s.box.w}, {"h", s.box.h}};
  return j;
}

GroundingSample sample_from_json(const json& j) {
  GroundingSample s;
  s.id = j.at("id").get<std::uint64_t>();
  s.split = split_from_name(j.at("split").get<std::string>());
  s.grid_h = j.at("grid_h").get<int>();
  s.grid_w = j.at("grid_w").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  s.features = j.at("features").get<std::vector<double>>();
  s.tokens = j.at("tokens").get<std::vector<int>>();
  const auto& b = j.at("box");
  s.box = {b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
           b.at("h").get<double>()};
  return s;
}

void save_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open dataset file for writing: " + path);
  json header;
  header["format"] = "attbalance-dataset";
  header["version"] = kDatasetVersion;
  json cfg = json::object();
  for (const auto& [k, v] : dataset_config_kv(ds.config)) cfg[k] = v;
  header["config"] = cfg;
  out << header.dump() << '\n';
  for (const auto& s : ds.train) out << sample_to_json(s).dump() << '\n';
  for (const auto& s : ds.val) out << sample_to_json(s).dump() << '\n';
  if (!out) throw IoError("failed writing dataset file: " + path);
}

using binio::Reader;
using binio::put_f64;
using binio::put_str;
using binio::put_u32;
using binio::put_u64;

void put_sample(std::string& buf, const GroundingSample& s) {
  put_u64(buf, s.id);
  buf.push_back(static_cast<char>(s.split));
  put_u32(buf, static_cast<std::uint32_t>(s.grid_h));
  put_u32(buf, static_cast<std::uint32_t>(s.grid_w));
  put_u32(buf, static_cast<std::uint32_t>(s.feature_dim));
  put_u32(buf, static_cast<std::uint32_t>(s.tokens.size()));
  for (const int t : s.tokens) put_u32(buf, static_cast<std::uint32_t>(t));
  put_f64(buf, s.box.cx);
  put_f64(buf, s.box.cy);
  put_f64(buf, s.box.w);
  put_f64(buf, s.box.h);
  put_u64(buf, s.features.size());
  for (const double f : s.features) put_f64(buf, f);
}

GroundingSample read_sample(Reader& r) {
  GroundingSample s;
  s.id = r.u64();
  r.need(1);
  s.split = static_cast<Split>(r.buf[r.pos]);
  ++r.pos;
  s.grid_h = static_cast<int>(r.u32());
  s.grid_w = static_cast<int>(r.u32());
  s.feature_dim = static_cast<int>(r.u32());
  const std::uint32_t n_tokens = r.u32();
  s.tokens.resize(n_tokens);
  for (auto& t : s.tokens) t = static_cast<int>(r.u32());
  s.box.cx = r.f64();
  s.box.cy = r.f64();
  s.box.w = r.f64();
  s.box.h = r.f64();
  const std::uint64_t n_feat = r.u64();
  s.features.resize(n_feat);
  for (auto& f : s.features) f = r.f64();
  return s;
}

void save_binary(const Dataset& ds, const std::string& path) {
  std::string buf;
  buf.append(kBinaryMagic, sizeof(kBinaryMagic));
  put_u32(buf, kDatasetVersion);
  const KvPairs kv = dataset_config_kv(ds.config);
  put_u32(buf, static_cast<std::uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) {
    put_str(buf, k);
    put_str(buf, v);
  }
  put_u64(buf, ds.train.size());
  for (const auto& s : ds.train) put_sample(buf, s);
  put_u64(buf, ds.val.size());
  for (const auto& s : ds.val) put_sample(buf, s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open dataset file for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing dataset file: " + path);
}

Dataset load_jsonl(const std::string& content, const std::string& path) {
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty dataset file: " + path);
  json header = json::parse(line);
  if (header.value("format", "") != "attbalance-dataset") {
    throw IoError("not an attbalance dataset file: " + path);
  }
  if (header.at("version").get<std::uint32_t>() != kDatasetVersion) {
    throw IoError("unsupported dataset version in " + path);
  }
  Dataset ds;
  for (const auto& [k, v] : header.at("config").items()) {
    if (!apply_dataset_config_kv(ds.config, k, v.get<std::string>())) {
      throw ConfigError("unknown dataset config key in file: " + k);
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    GroundingSample s = sample_from_json(json::parse(line));
    (s.split == Split::kTrain ? ds.train : ds.val).push_back(std::move(s));
  }
  return ds;
}

Dataset load_binary(const std::string& content) {
  Reader r{content, sizeof(kBinaryMagic)};
  if (r.u32() != kDatasetVersion) throw IoError("unsupported dataset version");
  Dataset ds;
  const std::uint32_t n_kv = r.u32();
  for (std::uint32_t i = 0; i < n_kv; ++i) {
    const std::string k = r.str();
    const std::string v = r.str();
    if (!apply_dataset_config_kv(ds.config, k, v)) {
      throw ConfigError("unknown dataset config key in file: " + k);
    }
  }
  const std::uint64_t n_train = r.u64();
  ds.train.reserve(n_train);
  for (std::uint64_t i = 0; i < n_train; ++i) ds.train.push_back(read_sample(r));
  const std::uint64_t n_val = r.u64();
  ds.val.reserve(n_val);
  for (std::uint64_t i = 0; i < n_val; ++i) ds.val.push_back(read_sample(r));
  return ds;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  if (dataset.config.file_format == DatasetFormat::kBinary) {
    save_binary(dataset, path);
  } else {
    save_jsonl(dataset, path);
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file: " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.size() >= sizeof(kBinaryMagic) &&
      std::memcmp(content.data(), kBinaryMagic, sizeof(kBinaryMagic)) == 0) {
    return load_binary(content);
  }
  return load_jsonl(content, path);
}

}  // namespace attbalance
