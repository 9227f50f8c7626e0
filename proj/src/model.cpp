#include "attbalance/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "attbalance/ops.hpp"
#include "attbalance/rng.hpp"

namespace attbalance {

namespace {

std::string split_label(Split s) { return s == Split::kTrain ? "train" : "val"; }

}  // namespace

std::string split_name(Split s) { return split_label(s); }

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  throw ConfigError("unknown split name: " + name);
}

void ModelConfig::validate() const {
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("d_model must be even and >= 2, got " + std::to_string(d_model));
  }
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (grid_h < 1 || grid_w < 1) throw ConfigError("visual grid must be at least 1x1");
  if (max_text_len < 1) throw ConfigError("max_text_len must be >= 1");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2 (id 0 is padding)");
  if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
  if (visual_feature_dim < 1) throw ConfigError("visual_feature_dim must be >= 1");
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embed", token_embed);
  out.emplace_back("text_pos", text_pos);
  out.emplace_back("vis_proj_w", vis_proj_w);
  out.emplace_back("vis_proj_b", vis_proj_b);
  out.emplace_back("pos_row", pos_row);
  out.emplace_back("pos_col", pos_col);
  out.emplace_back("object_query", object_query);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const LayerParams& lp = layers[i];
    out.emplace_back(p + "w_q", lp.w_q);
    out.emplace_back(p + "b_q", lp.b_q);
    out.emplace_back(p + "w_k", lp.w_k);
    out.emplace_back(p + "b_k", lp.b_k);
    out.emplace_back(p + "w_v", lp.w_v);
    out.emplace_back(p + "b_v", lp.b_v);
    out.emplace_back(p + "w_o", lp.w_o);
    out.emplace_back(p + "b_o", lp.b_o);
    out.emplace_back(p + "ln1_gamma", lp.ln1_gamma);
    out.emplace_back(p + "ln1_beta", lp.ln1_beta);
    out.emplace_back(p + "ln2_gamma", lp.ln2_gamma);
    out.emplace_back(p + "ln2_beta", lp.ln2_beta);
    out.emplace_back(p + "ff_w1", lp.ff_w1);
    out.emplace_back(p + "ff_b1", lp.ff_b1);
    out.emplace_back(p + "ff_w2", lp.ff_w2);
    out.emplace_back(p + "ff_b2", lp.ff_b2);
  }
  out.emplace_back("final_ln_gamma", final_ln_gamma);
  out.emplace_back("final_ln_beta", final_ln_beta);
  out.emplace_back("head_w1", head_w1);
  out.emplace_back("head_b1", head_b1);
  out.emplace_back("head_w2", head_w2);
  out.emplace_back("head_b2", head_b2);
  out.emplace_back("head_w3", head_w3);
  out.emplace_back("head_b3", head_b3);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t mlp = static_cast<std::size_t>(c.mlp_hidden);
  std::size_t n = 0;
  n += static_cast<std::size_t>(c.vocab_size) * d;           // token_embed
  n += static_cast<std::size_t>(c.max_text_len) * d;         // text_pos
  n += static_cast<std::size_t>(c.visual_feature_dim) * d;   // vis_proj_w
  n += d;                                                    // vis_proj_b
  n += static_cast<std::size_t>(c.grid_h) * (d / 2);         // pos_row
  n += static_cast<std::size_t>(c.grid_w) * (d / 2);         // pos_col
  n += d;                                                    // object_query
  const std::size_t per_layer = 4 * (d * d + d)              // attention projections
                                + 4 * d                      // two layer norms
                                + d * mlp + mlp + mlp * d + d;  // feed-forward
  n += static_cast<std::size_t>(c.n_layers) * per_layer;
  n += 2 * d;                                                // final layer norm
  n += d * mlp + mlp + mlp * mlp + mlp + mlp * 4 + 4;        // regression head
  return n;
}

const LayerAttention& AttentionStack::at_layer(int layer) const {
  for (const auto& la : layers) {
    if (la.layer == layer) return la;
  }
  throw ContractError("attention stack has no captured layer " + std::to_string(layer));
}

namespace {

Tensor make_param(Shape shape) { return Tensor::zeros(std::move(shape), /*requires_grad=*/true); }

void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
}

void fill_const(Tensor& t, double value) {
  for (auto& v : t.data()) v = value;
}

}  // namespace

ModelParams allocate_params(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  const int mlp = config.mlp_hidden;

  ModelParams p;
  p.config = config;
  p.token_embed = make_param({config.vocab_size, d});
  p.text_pos = make_param({config.max_text_len, d});
  p.vis_proj_w = make_param({config.visual_feature_dim, d});
  p.vis_proj_b = make_param({d});
  p.pos_row = make_param({config.grid_h, d / 2});
  p.pos_col = make_param({config.grid_w, d / 2});
  p.object_query = make_param({1, d});
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& lp : p.layers) {
    lp.w_q = make_param({d, d});
    lp.b_q = make_param({d});
    lp.w_k = make_param({d, d});
    lp.b_k = make_param({d});
    lp.w_v = make_param({d, d});
    lp.b_v = make_param({d});
    lp.w_o = make_param({d, d});
    lp.b_o = make_param({d});
    lp.ln1_gamma = make_param({d});
    lp.ln1_beta = make_param({d});
    lp.ln2_gamma = make_param({d});
    lp.ln2_beta = make_param({d});
    lp.ff_w1 = make_param({d, mlp});
    lp.ff_b1 = make_param({mlp});
    lp.ff_w2 = make_param({mlp, d});
    lp.ff_b2 = make_param({d});
  }
  p.final_ln_gamma = make_param({d});
  p.final_ln_beta = make_param({d});
  p.head_w1 = make_param({d, mlp});
  p.head_b1 = make_param({mlp});
  p.head_w2 = make_param({mlp, mlp});
  p.head_b2 = make_param({mlp});
  p.head_w3 = make_param({mlp, 4});
  p.head_b3 = make_param({4});
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = allocate_params(config);
  const int d = config.d_model;
  const int mlp = config.mlp_hidden;

  // Scaled-uniform init, one substream, draw order fixed by named().
  Rng rng = Rng(seed).substream("init");
  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double d_bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double vis_bound = 1.0 / std::sqrt(static_cast<double>(config.visual_feature_dim));
  const double mlp_bound = 1.0 / std::sqrt(static_cast<double>(mlp));

  fill_uniform(p.token_embed, rng, embed_bound);
  fill_uniform(p.text_pos, rng, embed_bound);
  fill_uniform(p.vis_proj_w, rng, vis_bound);
  fill_uniform(p.vis_proj_b, rng, vis_bound);
  fill_uniform(p.pos_row, rng, embed_bound);
  fill_uniform(p.pos_col, rng, embed_bound);
  fill_uniform(p.object_query, rng, embed_bound);
  for (auto& lp : p.layers) {
    fill_uniform(lp.w_q, rng, d_bound);
    fill_uniform(lp.b_q, rng, d_bound);
    fill_uniform(lp.w_k, rng, d_bound);
    fill_uniform(lp.b_k, rng, d_bound);
    fill_uniform(lp.w_v, rng, d_bound);
    fill_uniform(lp.b_v, rng, d_bound);
    fill_uniform(lp.w_o, rng, d_bound);
    fill_uniform(lp.b_o, rng, d_bound);
    fill_const(lp.ln1_gamma, 1.0);
    fill_const(lp.ln1_beta, 0.0);
    fill_const(lp.ln2_gamma, 1.0);
    fill_const(lp.ln2_beta, 0.0);
    fill_uniform(lp.ff_w1, rng, d_bound);
    fill_uniform(lp.ff_b1, rng, d_bound);
    fill_uniform(lp.ff_w2, rng, mlp_bound);
    fill_uniform(lp.ff_b2, rng, mlp_bound);
  }
  fill_const(p.final_ln_gamma, 1.0);
  fill_const(p.final_ln_beta, 0.0);
  fill_uniform(p.head_w1, rng, d_bound);
  fill_uniform(p.head_b1, rng, d_bound);
  fill_uniform(p.head_w2, rng, mlp_bound);
  fill_uniform(p.head_b2, rng, mlp_bound);
  fill_uniform(p.head_w3, rng, mlp_bound);
  fill_const(p.head_b3, 0.0);  // initial box sits at the image center
  return p;
}

namespace {

void check_sample(const ModelConfig& cfg, const GroundingSample& sample) {
  if (sample.grid_h != cfg.grid_h || sample.grid_w != cfg.grid_w) {
    throw DimensionError("forward: sample grid " + std::to_string(sample.grid_h) + "x" +
                         std::to_string(sample.grid_w) + " does not match model grid " +
                         std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w));
  }
  if (sample.feature_dim != cfg.visual_feature_dim) {
    throw DimensionError("forward: sample feature dim " + std::to_string(sample.feature_dim) +
                         " does not match model visual_feature_dim " +
                         std::to_string(cfg.visual_feature_dim));
  }
  if (sample.features.size() !=
      static_cast<std::size_t>(cfg.n_visual()) * static_cast<std::size_t>(cfg.visual_feature_dim)) {
    throw DimensionError("forward: sample feature buffer has wrong length");
  }
  if (static_cast<int>(sample.tokens.size()) > cfg.max_text_len) {
    throw DimensionError("forward: sample has " + std::to_string(sample.tokens.size()) +
                         " tokens, model max_text_len is " + std::to_string(cfg.max_text_len));
  }
  for (const int t : sample.tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw DimensionError("forward: token id " + std::to_string(t) +
                           " outside vocab of size " + std::to_string(cfg.vocab_size));
    }
  }
}

std::vector<int> normalized_capture_layers(const ModelConfig& cfg, std::vector<int> layers) {
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (const int l : layers) {
    if (l < 0 || l >= cfg.n_layers) {
      throw ContractError("capture layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(cfg.n_layers) + ")");
    }
  }
  return layers;
}

void check_finite(const Tensor& t, int layer) {
  for (const double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("forward: non-finite activation in layer " + std::to_string(layer));
    }
  }
}

Tensor multihead_self_attention(const Tensor& x, const LayerParams& lp, int n_heads) {
  const int d = x.shape()[1];
  const int dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor q = add_rowvec(matmul(x, lp.w_q), lp.b_q);
  Tensor k = add_rowvec(matmul(x, lp.w_k), lp.b_k);
  Tensor v = add_rowvec(matmul(x, lp.w_v), lp.b_v);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    Tensor probs = softmax(scores, 1);
    heads.push_back(matmul(probs, vh));
  }
  return add_rowvec(matmul(concat_cols(heads), lp.w_o), lp.b_o);
}

LayerAttention capture_layer_map(const Tensor& enter, const LayerParams& lp,
                                 const ModelConfig& cfg, int layer_idx) {
  Tensor src = cfg.capture_post_ln ? layer_norm(enter, lp.ln1_gamma, lp.ln1_beta) : enter;
  Tensor q = add_rowvec(matmul(slice_rows(src, 0, 1), lp.w_q), lp.b_q);
  Tensor k = add_rowvec(
      matmul(slice_rows(src, 1 + cfg.max_text_len, cfg.seq_len()), lp.w_k), lp.b_k);
  Tensor row = similarity_row(q, k, cfg.n_heads);
  return {layer_idx, softmax(row, 0), row};
}

}  // namespace

Tensor similarity_row(const Tensor& q, const Tensor& k, int n_heads) {
  const int d = q.shape()[1];
  if (k.shape()[1] != d) {
    throw DimensionError("similarity_row: query " + shape_str(q.shape()) +
                         " and keys " + shape_str(k.shape()) + " disagree on width");
  }
  if (n_heads < 1 || d % n_heads != 0) {
    throw DimensionError("similarity_row: width " + std::to_string(d) +
                         " not divisible into " + std::to_string(n_heads) + " heads");
  }
  const int dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    rows.push_back(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
  }
  return mean_over_axis(concat_rows(rows), 0);
}

ForwardResult forward(const ModelParams& params, const GroundingSample& sample,
                      const std::vector<int>& capture_layers) {
  const ModelConfig& cfg = params.config;
  check_sample(cfg, sample);
  const std::vector<int> capture = normalized_capture_layers(cfg, capture_layers);

  // Text: embeddings + 1D positions, padded with the reserved id 0.
  std::vector<int> token_ids(static_cast<std::size_t>(cfg.max_text_len), 0);
  std::copy(sample.tokens.begin(), sample.tokens.end(), token_ids.begin());
  Tensor text = add(gather_rows(params.token_embed, token_ids), params.text_pos);

  // Visual: linear projection of cell features + 2D positions (row half,
  // column half concatenated).
  Tensor vis_feat = Tensor::from_data({cfg.n_visual(), cfg.visual_feature_dim}, sample.features);
  Tensor vis = add_rowvec(matmul(vis_feat, params.vis_proj_w), params.vis_proj_b);
  std::vector<int> row_ids(static_cast<std::size_t>(cfg.n_visual()));
  std::vector<int> col_ids(static_cast<std::size_t>(cfg.n_visual()));
  for (int i = 0; i < cfg.n_visual(); ++i) {
    row_ids[static_cast<std::size_t>(i)] = i / cfg.grid_w;
    col_ids[static_cast<std::size_t>(i)] = i % cfg.grid_w;
  }
  Tensor vis_pos = concat_cols(
      {gather_rows(params.pos_row, row_ids), gather_rows(params.pos_col, col_ids)});
  vis = add(vis, vis_pos);

  Tensor x = concat_rows({params.object_query, text, vis});

  AttentionStack stack;
  std::size_t next_capture = 0;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(layer)];
    if (next_capture < capture.size() && capture[next_capture] == layer) {
      stack.layers.push_back(capture_layer_map(x, lp, cfg, layer));
      ++next_capture;
    }
    Tensor normed = layer_norm(x, lp.ln1_gamma, lp.ln1_beta);
    x = add(x, multihead_self_attention(normed, lp, cfg.n_heads));
    Tensor ff_in = layer_norm(x, lp.ln2_gamma, lp.ln2_beta);
    Tensor hidden = relu(add_rowvec(matmul(ff_in, lp.ff_w1), lp.ff_b1));
    x = add(x, add_rowvec(matmul(hidden, lp.ff_w2), lp.ff_b2));
    check_finite(x, layer);
  }

  Tensor out = layer_norm(x, params.final_ln_gamma, params.final_ln_beta);
  Tensor hq = slice_rows(out, 0, 1);
  Tensor h1 = relu(add_rowvec(matmul(hq, params.head_w1), params.head_b1));
  Tensor h2 = relu(add_rowvec(matmul(h1, params.head_w2), params.head_b2));
  Tensor box = sigmoid(add_rowvec(matmul(h2, params.head_w3), params.head_b3));

  return {box, std::move(stack)};
}

std::vector<ForwardResult> forward_batch(const ModelParams& params,
                                         const std::vector<GroundingSample>& samples,
                                         const std::vector<int>& capture_layers) {
  std::vector<ForwardResult> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(forward(params, s, capture_layers));
  return out;
}

KvPairs model_config_kv(const ModelConfig& c) {
  return {
      {"d_model", format_int(c.d_model)},
      {"n_heads", format_int(c.n_heads)},
      {"n_layers", format_int(c.n_layers)},
      {"grid_h", format_int(c.grid_h)},
      {"grid_w", format_int(c.grid_w)},
      {"max_text_len", format_int(c.max_text_len)},
      {"vocab_size", format_int(c.vocab_size)},
      {"mlp_hidden", format_int(c.mlp_hidden)},
      {"visual_feature_dim", format_int(c.visual_feature_dim)},
      {"capture_post_ln", format_bool(c.capture_post_ln)},
  };
}

bool apply_model_config_kv(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "d_model") c.d_model = static_cast<int>(parse_int(value));
  else if (key == "n_heads") c.n_heads = static_cast<int>(parse_int(value));
  else if (key == "n_layers") c.n_layers = static_cast<int>(parse_int(value));
  else if (key == "grid_h") c.grid_h = static_cast<int>(parse_int(value));
  else if (key == "grid_w") c.grid_w = static_cast<int>(parse_int(value));
  else if (key == "max_text_len") c.max_text_len = static_cast<int>(parse_int(value));
  else if (key == "vocab_size") c.vocab_size = static_cast<int>(parse_int(value));
  else if (key == "mlp_hidden") c.mlp_hidden = static_cast<int>(parse_int(value));
  else if (key == "visual_feature_dim") c.visual_feature_dim = static_cast<int>(parse_int(value));
  else if (key == "capture_post_ln") c.capture_post_ln = parse_bool(value);
  else return false;
  return true;
}

ModelConfig model_config_from_kv(const KvPairs& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (!apply_model_config_kv(c, k, v)) {
      throw ConfigError("unknown model config key: " + k);
    }
  }
  return c;
}

}  // namespace attbalance
