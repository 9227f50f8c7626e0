#pragma once

#include <vector>

#include "attbalance/model.hpp"

namespace attbalance {

// Exponential-moving-average shadow of the live parameters; the source of
// the rectification targets. Never participates in gradient computation.
struct MomentumState {
  ModelParams shadow;
  double m = 0.9;
  int step_count = 0;
};

// Shadow starts as an exact deep copy, so no warm-up correction is needed.
MomentumState momentum_init(const ModelParams& params, double m);

// shadow <- m * shadow + (1 - m) * params, once per optimizer step.
void momentum_update(MomentumState& state, const ModelParams& params);

// Forward pass on the shadow with recording disabled; returns detached maps.
AttentionStack momentum_forward(const MomentumState& state, const GroundingSample& sample,
                                const std::vector<int>& capture_layers);

}  // namespace attbalance
