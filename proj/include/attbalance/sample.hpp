#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attbalance/geometry.hpp"

namespace attbalance {

enum class Split : std::uint8_t { kTrain = 0, kVal = 1 };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

// One referring-grounding instance: a grid of per-cell feature vectors, a
// token sequence describing exactly one object, and its ground-truth box.
// Token id 0 is reserved for padding.
struct GroundingSample {
  std::uint64_t id = 0;
  Split split = Split::kTrain;
  int grid_h = 0;
  int grid_w = 0;
  int feature_dim = 0;
  std::vector<double> features;  // row-major [grid_h * grid_w, feature_dim]
  std::vector<int> tokens;       // length <= model max_text_len, ids < vocab
  BoxSpec box;
};

}  // namespace attbalance
