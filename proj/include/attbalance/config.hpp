#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attbalance/kv.hpp"
#include "attbalance/losses.hpp"
#include "attbalance/model.hpp"
#include "attbalance/synthetic.hpp"

namespace attbalance {

struct OptimConfig {
  std::string optimizer = "sgd";  // "sgd" or "adam"
  double lr = 0.1;
  int epochs = 30;
  int batch_size = 16;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// Everything a run needs; a run is reproducible from this plus the code
// version. Serializes to a flat key=value file with section prefixes.
struct RunConfig {
  ModelConfig model;
  AttBalanceConfig attbalance;
  DatasetConfig data;
  OptimConfig opt;
  std::string mode = "attbalance";  // "baseline" or "attbalance"
  std::string out_dir = "runs/out";
  std::string dataset_path;  // load instead of generating when non-empty
  int eval_every = 0;        // epochs between val evaluations; 0 = final only
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  std::vector<int> eval_capture_layers;  // empty = every layer
  // Wall-clock fields in the metrics stream are only emitted when set; the
  // stream is bitwise reproducible when left off.
  bool log_timing = false;

  bool attbalance_enabled() const { return mode == "attbalance"; }
  void validate() const;
};

KvPairs optim_config_kv(const OptimConfig& c);
bool apply_optim_config_kv(OptimConfig& c, const std::string& key, const std::string& value);

KvPairs run_config_kv(const RunConfig& c);
void apply_run_config_kv(RunConfig& c, const std::string& key, const std::string& value);
RunConfig run_config_from_kv(const KvPairs& kv);

// key = value lines, '#' comments.
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_text(const RunConfig& c);

// "key=value" from the command line.
void apply_config_override(RunConfig& c, const std::string& assignment);

}  // namespace attbalance
