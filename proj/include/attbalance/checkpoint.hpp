#pragma once

#include <string>
#include <utility>
#include <vector>

#include "attbalance/kv.hpp"
#include "attbalance/model.hpp"
#include "attbalance/momentum.hpp"

namespace attbalance {

// Versioned binary container: magic, version, model-config block, run-config
// block, then named tensors (name, rank, dims, little-endian f64 payload).
// Save/load/save is byte-identical because both blocks and the tensor list
// keep their order.
struct Checkpoint {
  KvPairs model_config;
  KvPairs run_config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find_tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Tensor-list packing. Live parameters use an empty prefix; the momentum
// shadow is stored under "momentum."; optimizer state under "opt.".
void append_params(std::vector<std::pair<std::string, Tensor>>& out, const ModelParams& params,
                   const std::string& prefix);
ModelParams params_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);
bool has_prefix(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace attbalance
