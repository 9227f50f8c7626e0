#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attbalance/analysis.hpp"
#include "attbalance/checkpoint.hpp"
#include "attbalance/config.hpp"
#include "attbalance/grad_check.hpp"
#include "attbalance/losses.hpp"
#include "attbalance/momentum.hpp"
#include "attbalance/synthetic.hpp"

namespace attbalance {

struct MetricsEvent {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  double wall_ms = 0.0;  // stays 0 unless timing is enabled
  double grad_norm = 0.0;
  LossBreakdown loss;
  std::optional<double> val_acc;
  std::optional<double> val_mean_in_mask;
};

// One standalone JSON object; the metrics stream is one line per step.
std::string metrics_event_line(const MetricsEvent& event);

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  int epochs_run = 0;
  int global_steps = 0;
  LossBreakdown final_breakdown;
};

// Full training run in cfg.out_dir: canonical config copy, metrics.jsonl,
// periodic + final checkpoints. Aborts with NumericError (keeping the last
// complete checkpoint) when any loss component turns non-finite.
TrainResult train(const RunConfig& cfg);

// Continue a run from a checkpoint produced by train(). Training state
// restarts at the recorded epoch boundary; the metrics stream is appended.
TrainResult resume(const std::string& checkpoint_path);

// Runs the model from a checkpoint over the samples and reduces to a report.
AnalysisReport evaluate_checkpoint(const Checkpoint& ckpt,
                                   const std::vector<GroundingSample>& samples,
                                   std::vector<int> capture_layers);

// Finite-difference audit of the full objective on a 2-sample batch, with
// rho and DAT weights frozen to the constants they are during optimization.
GradCheckReport grad_check_run(const RunConfig& cfg, bool corrupt_gradients = false);

struct ComparisonReport {
  std::string config_a;
  std::string config_b;
  int comparison_layer = 0;
  double acc_a = 0.0;
  double acc_b = 0.0;
  double mean_in_mask_a = 0.0;
  double mean_in_mask_b = 0.0;
  std::vector<int> layers;
  std::vector<double> rho_a;
  std::vector<double> rho_b;
  double delta_acc = 0.0;           // b - a
  double delta_mean_in_mask = 0.0;  // b - a
};

// Side-by-side evaluation of two finished runs on their shared dataset.
// Both run directories must have been trained on identical dataset configs.
ComparisonReport compare_runs(const std::string& run_dir_a, const std::string& run_dir_b);

std::string comparison_json(const ComparisonReport& report);

}  // namespace attbalance
