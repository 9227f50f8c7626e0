#include "attbalance/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

namespace attbalance {

namespace {

std::string layers_to_string(const std::vector<int>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    os << layers[i];
  }
  return os.str();
}

std::vector<int> layers_from_string(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) out.push_back(static_cast<int>(parse_int(tok)));
  }
  return out;
}

}  // namespace

KvPairs attbalance_config_kv(const AttBalanceConfig& c) {
  return {
      {"alpha_ar", format_double(c.alpha_ar)},
      {"alpha_1", format_double(c.alpha_1)},
      {"alpha_g", format_double(c.alpha_g)},
      {"applied_layers", layers_to_string(c.applied_layers)},
      {"attbalance_epochs", format_int(c.attbalance_epochs)},
      {"momentum", format_double(c.momentum)},
      {"rho_mode", c.rho_mode == RhoMode::kBatchSpearman ? "batch-spearman" : "disabled"},
      {"eps_log", format_double(c.eps_log)},
  };
}

bool apply_attbalance_config_kv(AttBalanceConfig& c, const std::string& key,
                                const std::string& value) {
  if (key == "alpha_ar") c.alpha_ar = parse_double(value);
  else if (key == "alpha_1") c.alpha_1 = parse_double(value);
  else if (key == "alpha_g") c.alpha_g = parse_double(value);
  else if (key == "applied_layers") c.applied_layers = layers_from_string(value);
  else if (key == "attbalance_epochs") c.attbalance_epochs = static_cast<int>(parse_int(value));
  else if (key == "momentum") c.momentum = parse_double(value);
  else if (key == "rho_mode") {
    if (value == "batch-spearman") c.rho_mode = RhoMode::kBatchSpearman;
    else if (value == "disabled") c.rho_mode = RhoMode::kDisabled;
    else throw ConfigError("unknown rho_mode: " + value);
  } else if (key == "eps_log") c.eps_log = parse_double(value);
  else return false;
  return true;
}

void AttBalanceConfig::validate() const {
  if (!(momentum > 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in (0, 1), got " + std::to_string(momentum));
  }
  if (applied_layers.empty()) {
    throw ConfigError("applied_layers must be non-empty when AttBalance is enabled");
  }
  if (attbalance_epochs < 0) throw ConfigError("attbalance_epochs must be >= 0");
  if (eps_log <= 0.0) throw ConfigError("eps_log must be positive");
}

namespace {

std::vector<double> fractional_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (const double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

}  // namespace

double batch_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw DimensionError("batch_rho: length mismatch, " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  }
  check_finite(x, "batch_rho");
  check_finite(y, "batch_rho");
  const std::size_t n = x.size();
  if (n < 2) return 1.0;
  const std::vector<double> rx = fractional_ranks(x);
  const std::vector<double> ry = fractional_ranks(y);
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double cov = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mx;
    const double dy = ry[i] - my;
    cov += dx * dy;
    vx += dx * dx;
    vy += dy * dy;
  }
  // A constant side has no ranking information; treated as neutral.
  if (vx <= 0.0 || vy <= 0.0) return 1.0;
  return cov / std::sqrt(vx * vy);
}

std::vector<double> relative_rho(const std::vector<double>& rhos) {
  if (rhos.empty()) throw ContractError("relative_rho: need at least one value");
  check_finite(rhos, "relative_rho");
  double mean = 0.0;
  for (const double r : rhos) mean += r;
  mean /= static_cast<double>(rhos.size());
  std::vector<double> out(rhos.size());
  for (std::size_t i = 0; i < rhos.size(); ++i) out[i] = rhos[i] - mean + 1.0;
  return out;
}

namespace {

void check_mask_grid(const LayerAttention& att, const SegMask& mask) {
  const std::size_t cells = static_cast<std::size_t>(mask.height) * mask.width;
  if (att.map.numel() != cells) {
    throw DimensionError("attention map of length " + std::to_string(att.map.numel()) +
                         " does not match mask grid " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width));
  }
}

}  // namespace

double in_mask_sum(const LayerAttention& attention, const SegMask& mask) {
  check_mask_grid(attention, mask);
  const auto& a = attention.map.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask.cells[i]) s += a[i];
  }
  return s;
}

Tensor rac_term(const LayerAttention& attention, const SegMask& mask, double eps_log) {
  check_mask_grid(attention, mask);
  const int n = static_cast<int>(attention.map.numel());
  Tensor m = Tensor::from_data({n}, mask.as_flat_doubles());
  Tensor m_bar = Tensor::from_data({n}, mask.complement_flat_doubles());
  Tensor inside = sum_all(mul(attention.map, m));
  Tensor outside = sum_all(mul(attention.map, m_bar));
  Tensor term = add(neg(log(inside, eps_log)),
                    neg(log(sub(Tensor::scalar(1.0), outside), eps_log)));
  return term;
}

Tensor rac_loss(const AttentionStack& attention, const SegMask& mask,
                const std::vector<double>& rel_rhos, double eps_log) {
  if (attention.layers.size() != rel_rhos.size()) {
    throw DimensionError("rac_loss: " + std::to_string(attention.layers.size()) +
                         " captured layers vs " + std::to_string(rel_rhos.size()) +
                         " rho weights");
  }
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < attention.layers.size(); ++i) {
    loss = add(loss, scale(rac_term(attention.layers[i], mask, eps_log), rel_rhos[i]));
  }
  return loss;
}

Tensor mrc_loss(const AttentionStack& attention_momentum, const AttentionStack& attention,
                double eps_log) {
  if (attention_momentum.layers.size() != attention.layers.size()) {
    throw ContractError("mrc_loss: momentum stack has " +
                        std::to_string(attention_momentum.layers.size()) +
                        " layers, live stack has " + std::to_string(attention.layers.size()));
  }
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < attention.layers.size(); ++i) {
    const LayerAttention& mom = attention_momentum.layers[i];
    const LayerAttention& live = attention.layers[i];
    if (mom.layer != live.layer) {
      throw ContractError("mrc_loss: layer index mismatch, momentum " +
                          std::to_string(mom.layer) + " vs live " + std::to_string(live.layer));
    }
    if (mom.map.numel() != live.map.numel()) {
      throw DimensionError("mrc_loss: map length mismatch at layer " +
                           std::to_string(live.layer));
    }
    // Momentum side is a constant: values copied out of the tape.
    const std::vector<double>& mv = mom.map.data();
    std::vector<double> log_mv(mv.size());
    for (std::size_t j = 0; j < mv.size(); ++j) {
      log_mv[j] = std::log(std::max(mv[j], eps_log));
    }
    const int n = static_cast<int>(mv.size());
    Tensor mom_const = Tensor::from_data({n}, mv);
    Tensor log_mom = Tensor::from_data({n}, std::move(log_mv));
    Tensor kl = sum_all(mul(mom_const, sub(log_mom, log(live.map, eps_log))));
    loss = add(loss, kl);
  }
  return loss;
}

double adw(double l_ar_plain) {
  if (!std::isfinite(l_ar_plain)) throw NumericError("adw: non-finite L_ar");
  // Rounding in the BCE terms can leave a negative epsilon.
  if (l_ar_plain < 0.0) {
    if (l_ar_plain < -1e-9) {
      throw ContractError("adw: L_ar must be non-negative, got " + std::to_string(l_ar_plain));
    }
    l_ar_plain = 0.0;
  }
  return 0.5 + 1.0 / (1.0 + std::exp(-l_ar_plain));
}

double odw(double box_ratio) {
  if (!(box_ratio > 0.0 && box_ratio <= 1.0)) {
    throw ContractError("odw: box_ratio must lie in (0, 1], got " + std::to_string(box_ratio));
  }
  return 0.5 + 1.0 / (1.0 + std::exp(box_ratio - 1.0));
}

namespace {

void check_component(double v, const char* name) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("total_loss: non-finite component ") + name);
  }
}

}  // namespace

std::pair<Tensor, LossBreakdown> total_loss(const std::vector<SampleLossInput>& batch,
                                            const AttBalanceConfig& cfg,
                                            bool attbalance_enabled, int epoch,
                                            const FrozenModulation* frozen) {
  if (batch.empty()) throw ContractError("total_loss: empty batch");
  const std::size_t b = batch.size();
  const double inv_b = 1.0 / static_cast<double>(b);

  LossBreakdown bd;
  bd.per_sample_l1.reserve(b);
  bd.per_sample_giou.reserve(b);
  for (const auto& s : batch) {
    const double l1v = s.l1.item();
    const double gv = s.giou.item();
    check_component(l1v, "l_1");
    check_component(gv, "l_giou");
    bd.per_sample_l1.push_back(l1v);
    bd.per_sample_giou.push_back(gv);
    bd.l_1 += l1v * inv_b;
    bd.l_giou += gv * inv_b;
  }

  bd.attbalance_active = attbalance_enabled && epoch < cfg.attbalance_epochs;
  if (!bd.attbalance_active) {
    Tensor reg = Tensor::scalar(0.0);
    for (const auto& s : batch) {
      reg = add(reg, add(scale(s.l1, cfg.alpha_1), scale(s.giou, cfg.alpha_g)));
    }
    Tensor total = scale(reg, inv_b);
    bd.total = total.item();
    check_component(bd.total, "total");
    return {total, bd};
  }

  cfg.validate();

  // All samples must carry the same captured layers.
  for (const auto& s : batch) {
    if (s.attn.layers.size() != batch[0].attn.layers.size()) {
      throw ContractError("total_loss: inconsistent captured layer counts across batch");
    }
    for (std::size_t i = 0; i < s.attn.layers.size(); ++i) {
      if (s.attn.layers[i].layer != batch[0].attn.layers[i].layer) {
        throw ContractError("total_loss: inconsistent captured layer ids across batch");
      }
    }
  }
  const std::size_t n_layers = batch[0].attn.layers.size();
  if (n_layers == 0) throw ContractError("total_loss: AttBalance active but no captured maps");
  for (const auto& la : batch[0].attn.layers) bd.layers.push_back(la.layer);

  // Per-layer rho over the minibatch, from detached in-mask sums and IoUs.
  std::vector<double> ious(b);
  for (std::size_t s = 0; s < b; ++s) ious[s] = batch[s].iou;
  bd.rhos.resize(n_layers, 1.0);
  if (cfg.rho_mode == RhoMode::kBatchSpearman) {
    std::vector<double> sums(b);
    for (std::size_t i = 0; i < n_layers; ++i) {
      for (std::size_t s = 0; s < b; ++s) {
        sums[s] = in_mask_sum(batch[s].attn.layers[i], batch[s].mask);
      }
      bd.rhos[i] = batch_rho(sums, ious);
    }
  }
  bd.rel_rhos = frozen ? frozen->rel_rhos : relative_rho(bd.rhos);
  if (bd.rel_rhos.size() != n_layers) {
    throw ContractError("total_loss: frozen rel_rhos length mismatch");
  }

  // Batch-mean BCE term per layer (rho-free), then the rho-weighted sum.
  std::vector<Tensor> layer_terms;
  layer_terms.reserve(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    Tensor acc = Tensor::scalar(0.0);
    for (const auto& s : batch) {
      acc = add(acc, rac_term(s.attn.layers[i], s.mask, cfg.eps_log));
    }
    layer_terms.push_back(scale(acc, inv_b));
  }
  Tensor l_rac_t = Tensor::scalar(0.0);
  double l_rac_plain = 0.0;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const double term = layer_terms[i].item();
    check_component(term, "l_rac");
    bd.rac_terms.push_back(term);
    l_rac_plain += term;
    l_rac_t = add(l_rac_t, scale(layer_terms[i], bd.rel_rhos[i]));
  }
  bd.l_rac = l_rac_t.item();

  // MRC per layer, batch mean.
  Tensor l_mrc_t = Tensor::scalar(0.0);
  const bool have_momentum = !batch[0].attn_mom.layers.empty();
  for (std::size_t i = 0; i < n_layers; ++i) {
    Tensor acc = Tensor::scalar(0.0);
    if (have_momentum) {
      for (const auto& s : batch) {
        AttentionStack mom_one{{s.attn_mom.layers[i]}};
        AttentionStack live_one{{s.attn.layers[i]}};
        acc = add(acc, mrc_loss(mom_one, live_one, cfg.eps_log));
      }
    }
    Tensor layer_mrc = scale(acc, inv_b);
    const double v = layer_mrc.item();
    check_component(v, "l_mrc");
    bd.mrc_terms.push_back(v);
    l_mrc_t = add(l_mrc_t, layer_mrc);
  }
  bd.l_mrc = l_mrc_t.item();

  Tensor l_ar_t = add(l_rac_t, l_mrc_t);
  bd.l_ar = l_ar_t.item();
  bd.l_ar_plain = l_rac_plain + bd.l_mrc;
  check_component(bd.l_ar, "l_ar");

  bd.w_adw = frozen ? frozen->w_adw : adw(bd.l_ar_plain);

  if (frozen && frozen->w_odw.size() != b) {
    throw ContractError("total_loss: frozen w_odw length mismatch");
  }
  bd.per_sample_w_odw.resize(b);
  bd.w_odw = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    bd.per_sample_w_odw[s] = frozen ? frozen->w_odw[s] : odw(batch[s].box_ratio);
    bd.w_odw += bd.per_sample_w_odw[s] * inv_b;
  }

  Tensor reg = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < b; ++s) {
    Tensor weighted = scale(add(scale(batch[s].l1, cfg.alpha_1), scale(batch[s].giou, cfg.alpha_g)),
                            bd.per_sample_w_odw[s]);
    reg = add(reg, weighted);
  }
  reg = scale(reg, inv_b);

  Tensor total = add(scale(l_ar_t, cfg.alpha_ar), scale(reg, bd.w_adw));
  bd.total = total.item();
  check_component(bd.total, "total");
  return {total, bd};
}

}  // namespace attbalance
