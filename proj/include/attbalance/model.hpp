#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attbalance/kv.hpp"
#include "attbalance/sample.hpp"
#include "attbalance/tensor.hpp"

namespace attbalance {

struct ModelConfig {
  int d_model = 32;
  int n_heads = 4;
  int n_layers = 6;
  int grid_h = 8;
  int grid_w = 8;
  int max_text_len = 8;
  int vocab_size = 16;
  int mlp_hidden = 64;
  int visual_feature_dim = 12;
  // Captured Q/K states: false = raw states entering the layer (default),
  // true = the layer-normed states its attention actually consumes.
  bool capture_post_ln = false;

  int n_visual() const { return grid_h * grid_w; }
  int seq_len() const { return 1 + max_text_len + n_visual(); }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct LayerParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embed;   // vocab x d
  Tensor text_pos;      // L x d
  Tensor vis_proj_w;    // F x d
  Tensor vis_proj_b;    // [d]
  Tensor pos_row;       // grid_h x d/2
  Tensor pos_col;       // grid_w x d/2
  Tensor object_query;  // 1 x d
  std::vector<LayerParams> layers;
  Tensor final_ln_gamma, final_ln_beta;
  Tensor head_w1, head_b1, head_w2, head_b2, head_w3, head_b3;

  // Stable name -> handle listing; the order defines initialization draw
  // order, checkpoint layout, and grad-check grouping.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
};

// Expected parameter count for a config, without materializing parameters.
std::size_t parameter_count(const ModelConfig& config);

// Per-layer object-query -> visual-token probability map (Eq. 1 shape):
// head-averaged scaled dot products, softmaxed over the N_v visual positions.
struct LayerAttention {
  int layer = 0;
  Tensor map;         // [N_v], sums to 1
  Tensor presoftmax;  // [N_v], head-averaged similarity row
};

struct AttentionStack {
  std::vector<LayerAttention> layers;

  const LayerAttention& at_layer(int layer) const;
};

struct ForwardResult {
  Tensor pred_box;  // [1, 4] = (cx, cy, w, h), each in (0, 1)
  AttentionStack attention;
};

// Zero-valued parameter set with the right shapes; checkpoint loading and
// initialization both start here.
ModelParams allocate_params(const ModelConfig& config);

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

ForwardResult forward(const ModelParams& params, const GroundingSample& sample,
                      const std::vector<int>& capture_layers);

std::vector<ForwardResult> forward_batch(const ModelParams& params,
                                         const std::vector<GroundingSample>& samples,
                                         const std::vector<int>& capture_layers);

// Head-averaged scaled-dot-product similarity between one query state row
// and a matrix of key states, before softmax. Shared by the capture path
// and by tests probing the 1/sqrt(d_k) scaling.
Tensor similarity_row(const Tensor& q, const Tensor& k, int n_heads);

KvPairs model_config_kv(const ModelConfig& c);
bool apply_model_config_kv(ModelConfig& c, const std::string& key, const std::string& value);
ModelConfig model_config_from_kv(const KvPairs& kv);

}  // namespace attbalance
