#include "attbalance/momentum.hpp"

#include <cmath>
#include <string>

namespace attbalance {

namespace {

ModelParams deep_copy_detached(const ModelParams& params) {
  ModelParams copy = params;  // handle copies; every tensor replaced below
  // Rebuild every tensor as an independent, gradient-free buffer.
  copy.token_embed = params.token_embed.detach();
  copy.text_pos = params.text_pos.detach();
  copy.vis_proj_w = params.vis_proj_w.detach();
  copy.vis_proj_b = params.vis_proj_b.detach();
  copy.pos_row = params.pos_row.detach();
  copy.pos_col = params.pos_col.detach();
  copy.object_query = params.object_query.detach();
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const LayerParams& in = params.layers[i];
    LayerParams& out = copy.layers[i];
    out.w_q = in.w_q.detach();
    out.b_q = in.b_q.detach();
    out.w_k = in.w_k.detach();
    out.b_k = in.b_k.detach();
    out.w_v = in.w_v.detach();
    out.b_v = in.b_v.detach();
    out.w_o = in.w_o.detach();
    out.b_o = in.b_o.detach();
    out.ln1_gamma = in.ln1_gamma.detach();
    out.ln1_beta = in.ln1_beta.detach();
    out.ln2_gamma = in.ln2_gamma.detach();
    out.ln2_beta = in.ln2_beta.detach();
    out.ff_w1 = in.ff_w1.detach();
    out.ff_b1 = in.ff_b1.detach();
    out.ff_w2 = in.ff_w2.detach();
    out.ff_b2 = in.ff_b2.detach();
  }
  copy.final_ln_gamma = params.final_ln_gamma.detach();
  copy.final_ln_beta = params.final_ln_beta.detach();
  copy.head_w1 = params.head_w1.detach();
  copy.head_b1 = params.head_b1.detach();
  copy.head_w2 = params.head_w2.detach();
  copy.head_b2 = params.head_b2.detach();
  copy.head_w3 = params.head_w3.detach();
  copy.head_b3 = params.head_b3.detach();
  return copy;
}

}  // namespace

MomentumState momentum_init(const ModelParams& params, double m) {
  if (!(m > 0.0 && m < 1.0)) {
    throw ConfigError("momentum coefficient must lie in (0, 1), got " + std::to_string(m));
  }
  for (const auto& [name, t] : params.named()) {
    for (const double v : t.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("momentum_init: non-finite value in parameter " + name);
      }
    }
  }
  return {deep_copy_detached(params), m, 0};
}

void momentum_update(MomentumState& state, const ModelParams& params) {
  const auto shadow = state.shadow.named();
  const auto live = params.named();
  if (shadow.size() != live.size()) {
    throw DimensionError("momentum_update: parameter set size mismatch");
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    Tensor s = shadow[i].second;
    const Tensor& p = live[i].second;
    if (s.shape() != p.shape()) {
      throw DimensionError("momentum_update: shape mismatch for " + shadow[i].first + ", " +
                           shape_str(s.shape()) + " vs " + shape_str(p.shape()));
    }
    auto& sd = s.data();
    const auto& pd = p.data();
    for (std::size_t j = 0; j < sd.size(); ++j) {
      sd[j] = state.m * sd[j] + (1.0 - state.m) * pd[j];
    }
  }
  ++state.step_count;
}

AttentionStack momentum_forward(const MomentumState& state, const GroundingSample& sample,
                                const std::vector<int>& capture_layers) {
  NoGradGuard no_grad;
  return forward(state.shadow, sample, capture_layers).attention;
}

}  // namespace attbalance
