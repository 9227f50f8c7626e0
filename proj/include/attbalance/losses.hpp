#pragma once

#include <utility>
#include <vector>

#include "attbalance/geometry.hpp"
#include "attbalance/kv.hpp"
#include "attbalance/model.hpp"
#include "attbalance/ops.hpp"

namespace attbalance {

enum class RhoMode { kBatchSpearman, kDisabled };

struct AttBalanceConfig {
  double alpha_ar = 1.0;
  double alpha_1 = 1.0;
  double alpha_g = 1.0;
  std::vector<int> applied_layers = {2, 3, 4, 5};
  int attbalance_epochs = 60;
  double momentum = 0.9;
  RhoMode rho_mode = RhoMode::kBatchSpearman;
  double eps_log = kLogFloor;

  void validate() const;
};

// Every scalar of Eq. (1)-(5) for one batch. Per-layer entries follow the
// captured layer order; per-sample entries follow batch order. rac_terms are
// the rho-free BCE terms, so l_rac recomposes as sum(rel_rhos * rac_terms).
struct LossBreakdown {
  bool attbalance_active = false;
  std::vector<int> layers;
  std::vector<double> rhos;
  std::vector<double> rel_rhos;
  std::vector<double> rac_terms;
  std::vector<double> mrc_terms;
  double l_rac = 0.0;
  double l_mrc = 0.0;
  double l_ar = 0.0;
  double l_ar_plain = 0.0;
  double w_adw = 1.0;
  double w_odw = 1.0;  // batch mean of the per-sample weights
  std::vector<double> per_sample_w_odw;
  std::vector<double> per_sample_l1;
  std::vector<double> per_sample_giou;
  double l_1 = 0.0;
  double l_giou = 0.0;
  double total = 0.0;
};

// Spearman rank correlation with average ranks for ties, on detached values.
// Returns 1.0 for degenerate inputs (fewer than 2 points or a constant side).
double batch_rho(const std::vector<double>& x, const std::vector<double>& y);

// rho_i' = rho_i - mean(rho) + 1; output mean is exactly 1.
std::vector<double> relative_rho(const std::vector<double>& rhos);

// Rho-free BCE of Eq. (1) for one captured map:
// -log(sum a . M) - log(1 - sum a . complement(M)).
Tensor rac_term(const LayerAttention& attention, const SegMask& mask,
                double eps_log = kLogFloor);

// Full RAC for one sample: sum_i rel_rhos[i] * rac_term(layer i).
Tensor rac_loss(const AttentionStack& attention, const SegMask& mask,
                const std::vector<double>& rel_rhos, double eps_log = kLogFloor);

// KL(momentum map || live map) summed over layers; the momentum side is
// treated as constants.
Tensor mrc_loss(const AttentionStack& attention_momentum, const AttentionStack& attention,
                double eps_log = kLogFloor);

// Eq. (3): 0.5 + sigmoid(l_ar_plain), in (1.0, 1.5) for positive input.
double adw(double l_ar_plain);

// Eq. (4): 0.5 + 1 / (1 + exp(box_ratio - 1)), decreasing in box_ratio.
double odw(double box_ratio);

// Probability mass the map places inside the mask; detached.
double in_mask_sum(const LayerAttention& attention, const SegMask& mask);

struct SampleLossInput {
  AttentionStack attn;      // live maps; empty when AttBalance is off
  AttentionStack attn_mom;  // detached momentum maps; may be empty
  SegMask mask;
  double box_ratio = 1.0;
  double iou = 0.0;  // live prediction vs gt, detached
  Tensor l1;
  Tensor giou;
};

// Rho and DAT weights pinned to externally supplied constants. Used by the
// gradient checker: the weights are constants of the optimization, so the
// objective differentiated numerically must hold them fixed too.
struct FrozenModulation {
  std::vector<double> rel_rhos;
  double w_adw = 1.0;
  std::vector<double> w_odw;
};

// Eq. (5) batch assembly. While active (enabled and epoch < attbalance_epochs):
//   total = alpha_ar * L_ar + W_adw * mean_s(W_odw(s) * (alpha_1 L1(s) + alpha_g Lgiou(s)))
// otherwise total = alpha_1 * L_1 + alpha_g * L_giou.
std::pair<Tensor, LossBreakdown> total_loss(const std::vector<SampleLossInput>& batch,
                                            const AttBalanceConfig& cfg,
                                            bool attbalance_enabled, int epoch,
                                            const FrozenModulation* frozen = nullptr);

KvPairs attbalance_config_kv(const AttBalanceConfig& c);
bool apply_attbalance_config_kv(AttBalanceConfig& c, const std::string& key,
                                const std::string& value);

}  // namespace attbalance
