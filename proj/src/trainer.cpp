#include "attbalance/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "attbalance/rng.hpp"

namespace attbalance {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json breakdown_json(const LossBreakdown& bd) {
  json j;
  j["attbalance_active"] = bd.attbalance_active;
  j["layers"] = bd.layers;
  j["rhos"] = bd.rhos;
  j["rel_rhos"] = bd.rel_rhos;
  j["rac_terms"] = bd.rac_terms;
  j["mrc_terms"] = bd.mrc_terms;
  j["l_rac"] = bd.l_rac;
  j["l_mrc"] = bd.l_mrc;
  j["l_ar"] = bd.l_ar;
  j["l_ar_plain"] = bd.l_ar_plain;
  j["w_adw"] = bd.w_adw;
  j["w_odw"] = bd.w_odw;
  j["per_sample_w_odw"] = bd.per_sample_w_odw;
  j["per_sample_l1"] = bd.per_sample_l1;
  j["per_sample_giou"] = bd.per_sample_giou;
  j["l_1"] = bd.l_1;
  j["l_giou"] = bd.l_giou;
  j["total"] = bd.total;
  return j;
}

class Optimizer {
 public:
  Optimizer(const OptimConfig& cfg, const ModelParams& params) : cfg_(cfg) {
    if (cfg_.optimizer == "adam") {
      for (const auto& [name, t] : params.named()) {
        m_.emplace_back("opt.m." + name, Tensor::zeros(t.shape()));
        v_.emplace_back("opt.v." + name, Tensor::zeros(t.shape()));
      }
    }
  }

  void step(ModelParams& params) {
    auto named = params.named();
    if (cfg_.optimizer == "sgd") {
      for (auto& [name, t] : named) {
        if (!t.has_grad()) continue;
        auto& d = t.data();
        const auto& g = t.grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= cfg_.lr * g[i];
      }
      return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, t_);
    for (std::size_t pi = 0; pi < named.size(); ++pi) {
      Tensor& t = named[pi].second;
      if (!t.has_grad()) continue;
      auto& d = t.data();
      const auto& g = t.grad();
      auto& m = m_[pi].second.data();
      auto& v = v_[pi].second.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        m[i] = cfg_.adam_beta1 * m[i] + (1.0 - cfg_.adam_beta1) * g[i];
        v[i] = cfg_.adam_beta2 * v[i] + (1.0 - cfg_.adam_beta2) * g[i] * g[i];
        d[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
      }
    }
  }

  int timestep() const { return t_; }
  void set_timestep(int t) { t_ = t; }

  std::vector<std::pair<std::string, Tensor>> state_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.insert(out.end(), m_.begin(), m_.end());
    out.insert(out.end(), v_.begin(), v_.end());
    return out;
  }

  void load_state(const Checkpoint& ckpt) {
    for (auto* store : {&m_, &v_}) {
      for (auto& [name, t] : *store) {
        const Tensor* src = ckpt.find_tensor(name);
        if (!src) throw IoError("checkpoint is missing optimizer tensor " + name);
        t.data() = src->data();
      }
    }
  }

 private:
  OptimConfig cfg_;
  int t_ = 0;
  std::vector<std::pair<std::string, Tensor>> m_;
  std::vector<std::pair<std::string, Tensor>> v_;
};

double clip_global_norm(ModelParams& params, double max_norm) {
  auto named = params.named();
  double sq = 0.0;
  for (const auto& [name, t] : named) {
    if (!t.has_grad()) continue;
    for (const double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, t] : named) {
      if (!t.has_grad()) continue;
      Tensor h = t;
      for (auto& g : h.ensure_grad()) g *= s;
    }
  }
  return norm;
}

void drop_all_grads(ModelParams& params) {
  for (auto& [name, t] : params.named()) {
    Tensor h = t;
    h.drop_grad();
  }
}

std::vector<int> all_layers(const ModelConfig& cfg) {
  std::vector<int> layers(static_cast<std::size_t>(cfg.n_layers));
  for (int i = 0; i < cfg.n_layers; ++i) layers[static_cast<std::size_t>(i)] = i;
  return layers;
}

std::uint64_t crop_seed(std::uint64_t base, int epoch, std::uint64_t sample_id) {
  return Rng(base)
      .substream("augment", static_cast<std::uint64_t>(epoch))
      .substream("sample", sample_id)
      .seed();
}

SampleLossInput build_loss_input(const ForwardResult& fwd, const GroundingSample& sample,
                                 bool active, const MomentumState* momentum,
                                 const std::vector<int>& capture) {
  SampleLossInput in;
  in.l1 = l1_loss(fwd.pred_box, sample.box);
  in.giou = giou_loss(fwd.pred_box, sample.box);
  if (active) {
    in.attn = fwd.attention;
    in.mask = rasterize_mask(sample.box, sample.grid_h, sample.grid_w);
    in.box_ratio = box_ratio(sample.box);
    const auto& p = fwd.pred_box.data();
    in.iou = iou({p[0], p[1], p[2], p[3]}, sample.box);
    if (momentum) in.attn_mom = momentum_forward(*momentum, sample, capture);
  }
  return in;
}

void save_run_checkpoint(const std::string& path, const RunConfig& cfg,
                         const ModelParams& params, const MomentumState* momentum,
                         const Optimizer& opt, int next_epoch, int global_step) {
  Checkpoint ck;
  ck.model_config = model_config_kv(cfg.model);
  ck.run_config = run_config_kv(cfg);
  ck.run_config.emplace_back("resume.next_epoch", format_int(next_epoch));
  ck.run_config.emplace_back("resume.global_step", format_int(global_step));
  ck.run_config.emplace_back("resume.opt_t", format_int(opt.timestep()));
  ck.run_config.emplace_back("resume.momentum_steps",
                             format_int(momentum ? momentum->step_count : 0));
  append_params(ck.tensors, params, "");
  if (momentum) append_params(ck.tensors, momentum->shadow, "momentum.");
  if (cfg.opt.optimizer == "adam") {
    for (const auto& [name, t] : opt.state_tensors()) ck.tensors.emplace_back(name, t);
  }
  save_checkpoint(ck, path);
}

Dataset obtain_dataset(const RunConfig& cfg) {
  if (!cfg.dataset_path.empty()) {
    Dataset ds = load_dataset(cfg.dataset_path);
    if (ds.config.grid_h != cfg.model.grid_h || ds.config.grid_w != cfg.model.grid_w) {
      throw ConfigError("dataset grid does not match model grid");
    }
    return ds;
  }
  return generate(cfg.data);
}

struct TrainingHandles {
  RunConfig cfg;
  ModelParams params;
  std::optional<MomentumState> momentum;
  int start_epoch = 0;
  int global_step = 0;
  int opt_timestep = 0;
  bool fresh = true;
  const Checkpoint* resume_from = nullptr;
};

TrainResult run_training(TrainingHandles h) {
  RunConfig& cfg = h.cfg;
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  Dataset ds = obtain_dataset(cfg);
  Optimizer opt(cfg.opt, h.params);
  opt.set_timestep(h.opt_timestep);
  if (h.resume_from && cfg.opt.optimizer == "adam") opt.load_state(*h.resume_from);

  const std::string config_path = cfg.out_dir + "/config.cfg";
  const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
  if (h.fresh) {
    std::ofstream cfg_out(config_path, std::ios::binary);
    cfg_out << run_config_text(cfg);
    std::ofstream wipe(metrics_path, std::ios::binary | std::ios::trunc);
  }
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);
  if (!metrics) throw IoError("cannot open metrics stream: " + metrics_path);

  const std::vector<int> eval_layers =
      cfg.eval_capture_layers.empty() ? all_layers(cfg.model) : cfg.eval_capture_layers;
  const int watch_layer = cfg.attbalance_enabled() && !cfg.attbalance.applied_layers.empty()
                              ? *std::max_element(cfg.attbalance.applied_layers.begin(),
                                                  cfg.attbalance.applied_layers.end())
                              : cfg.model.n_layers - 1;

  std::string last_checkpoint;
  TrainResult result;
  result.metrics_path = metrics_path;

  std::vector<std::size_t> order(ds.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  try {
    for (int epoch = h.start_epoch; epoch < cfg.opt.epochs; ++epoch) {
      Rng(cfg.opt.seed).substream("shuffle", static_cast<std::uint64_t>(epoch)).shuffle(order);
      const bool active =
          cfg.attbalance_enabled() && epoch < cfg.attbalance.attbalance_epochs;
      const std::vector<int> capture = active ? cfg.attbalance.applied_layers : std::vector<int>{};
      const bool eval_epoch = (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) ||
                              epoch + 1 == cfg.opt.epochs;

      for (std::size_t begin = 0; begin < order.size(); begin += cfg.opt.batch_size) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t end =
            std::min(order.size(), begin + static_cast<std::size_t>(cfg.opt.batch_size));
        Tape::active().reset();
        drop_all_grads(h.params);

        std::vector<SampleLossInput> inputs;
        inputs.reserve(end - begin);
        for (std::size_t bi = begin; bi < end; ++bi) {
          GroundingSample sample = ds.train[order[bi]];
          if (cfg.data.crop_augment) {
            sample = augment_crop(sample, crop_seed(cfg.opt.seed, epoch, sample.id));
          }
          ForwardResult fwd = forward(h.params, sample, capture);
          inputs.push_back(build_loss_input(fwd, sample, active,
                                            h.momentum ? &*h.momentum : nullptr, capture));
        }
        auto [loss, breakdown] = total_loss(inputs, cfg.attbalance,
                                            cfg.attbalance_enabled(), epoch);
        Tape::active().backward(loss);
        const double grad_norm = clip_global_norm(h.params, cfg.opt.grad_clip);
        opt.step(h.params);
        if (h.momentum) momentum_update(*h.momentum, h.params);
        Tape::active().reset();

        MetricsEvent ev;
        ev.step = h.global_step;
        ev.epoch = epoch;
        ev.lr = cfg.opt.lr;
        ev.grad_norm = grad_norm;
        ev.loss = breakdown;
        const bool last_step_of_epoch = end == order.size();
        if (eval_epoch && last_step_of_epoch) {
          const auto records = collect(h.params, ds.val, eval_layers);
          ev.val_acc = accuracy(records, 0.5);
          ev.val_mean_in_mask = mean_in_mask(records, watch_layer);
        }
        if (cfg.log_timing) {
          ev.wall_ms = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
        }
        metrics << metrics_event_line(ev) << '\n';
        metrics.flush();
        result.final_breakdown = breakdown;
        ++h.global_step;
      }

      if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
          epoch + 1 < cfg.opt.epochs) {
        const std::string path =
            cfg.out_dir + "/checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt";
        save_run_checkpoint(path, cfg, h.params, h.momentum ? &*h.momentum : nullptr, opt,
                            epoch + 1, h.global_step);
        last_checkpoint = path;
      }
      result.epochs_run = epoch + 1;
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                       (last_checkpoint.empty() ? "none" : last_checkpoint));
  }

  const std::string final_path = cfg.out_dir + "/final.ckpt";
  save_run_checkpoint(final_path, cfg, h.params, h.momentum ? &*h.momentum : nullptr, opt,
                      cfg.opt.epochs, h.global_step);
  result.checkpoint_path = final_path;
  result.global_steps = h.global_step;

  const auto records = collect(h.params, ds.val, eval_layers);
  std::ofstream report_out(cfg.out_dir + "/eval_report.json", std::ios::binary);
  report_out << report_json(analyze(records)) << '\n';

  return result;
}

}  // namespace

std::string metrics_event_line(const MetricsEvent& event) {
  json j = breakdown_json(event.loss);
  j["step"] = event.step;
  j["epoch"] = event.epoch;
  j["lr"] = event.lr;
  j["wall_ms"] = event.wall_ms;
  j["grad_norm"] = event.grad_norm;
  if (event.val_acc) j["val_acc"] = *event.val_acc;
  if (event.val_mean_in_mask) j["val_mean_in_mask"] = *event.val_mean_in_mask;
  return j.dump();
}

TrainResult train(const RunConfig& cfg) {
  TrainingHandles h;
  h.cfg = cfg;
  h.cfg.validate();
  h.params = init_params(cfg.model, cfg.opt.seed);
  if (cfg.attbalance_enabled()) {
    h.momentum = momentum_init(h.params, cfg.attbalance.momentum);
  }
  return run_training(std::move(h));
}

TrainResult resume(const std::string& checkpoint_path) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  KvPairs plain;
  int next_epoch = 0;
  int global_step = 0;
  int opt_t = 0;
  int momentum_steps = 0;
  for (const auto& [k, v] : ck.run_config) {
    if (k == "resume.next_epoch") next_epoch = static_cast<int>(parse_int(v));
    else if (k == "resume.global_step") global_step = static_cast<int>(parse_int(v));
    else if (k == "resume.opt_t") opt_t = static_cast<int>(parse_int(v));
    else if (k == "resume.momentum_steps") momentum_steps = static_cast<int>(parse_int(v));
    else plain.emplace_back(k, v);
  }
  TrainingHandles h;
  h.cfg = run_config_from_kv(plain);
  h.params = params_from_checkpoint(ck, "");
  if (h.cfg.attbalance_enabled()) {
    if (!has_prefix(ck, "momentum.")) {
      throw IoError("checkpoint lacks momentum shadow tensors needed to resume");
    }
    h.momentum = momentum_init(params_from_checkpoint(ck, "momentum."),
                               h.cfg.attbalance.momentum);
    h.momentum->step_count = momentum_steps;
  }
  h.start_epoch = next_epoch;
  h.global_step = global_step;
  h.opt_timestep = opt_t;
  h.fresh = false;
  h.resume_from = &ck;
  return run_training(std::move(h));
}

AnalysisReport evaluate_checkpoint(const Checkpoint& ckpt,
                                   const std::vector<GroundingSample>& samples,
                                   std::vector<int> capture_layers) {
  const ModelConfig config = model_config_from_kv(ckpt.model_config);
  if (samples.empty()) throw ContractError("evaluate: no samples");
  if (samples[0].grid_h != config.grid_h || samples[0].grid_w != config.grid_w ||
      samples[0].feature_dim != config.visual_feature_dim) {
    throw ConfigError("evaluate: checkpoint model does not match the dataset layout");
  }
  ModelParams params = params_from_checkpoint(ckpt, "");
  if (capture_layers.empty()) capture_layers = all_layers(config);
  return analyze(collect(params, samples, capture_layers));
}

GradCheckReport grad_check_run(const RunConfig& cfg, bool corrupt_gradients) {
  RunConfig rc = cfg;
  rc.validate();
  Dataset ds = obtain_dataset(rc);
  const std::size_t n = std::min<std::size_t>(2, ds.train.size());
  std::vector<GroundingSample> batch(ds.train.begin(),
                                     ds.train.begin() + static_cast<std::ptrdiff_t>(n));

  ModelParams params = init_params(rc.model, rc.opt.seed);
  std::optional<MomentumState> momentum;
  if (rc.attbalance_enabled()) {
    momentum = momentum_init(params, rc.attbalance.momentum);
    // A few updates against frozen params keep the shadow distinct from the
    // live weights, so the MRC term is non-trivial during the check.
    ModelParams jitter = init_params(rc.model, rc.opt.seed + 1);
    momentum_update(*momentum, jitter);
    momentum_update(*momentum, params);
  }
  const std::vector<int> capture =
      rc.attbalance_enabled() ? rc.attbalance.applied_layers : std::vector<int>{};

  auto assemble = [&](const FrozenModulation* frozen) {
    std::vector<SampleLossInput> inputs;
    for (const auto& sample : batch) {
      ForwardResult fwd = forward(params, sample, capture);
      inputs.push_back(build_loss_input(fwd, sample, rc.attbalance_enabled(),
                                        momentum ? &*momentum : nullptr, capture));
    }
    return total_loss(inputs, rc.attbalance, rc.attbalance_enabled(), /*epoch=*/0, frozen);
  };

  // First pass pins rho and the DAT weights; the audited objective treats
  // them as the constants they are in the real update.
  Tape::active().reset();
  FrozenModulation frozen;
  {
    NoGradGuard no_grad;
    const LossBreakdown bd = assemble(nullptr).second;
    frozen.rel_rhos = bd.rel_rhos;
    frozen.w_adw = bd.w_adw;
    frozen.w_odw = bd.per_sample_w_odw;
  }

  auto objective = [&]() {
    Tensor loss = assemble(rc.attbalance_enabled() ? &frozen : nullptr).first;
    return corrupt_gradients ? with_corrupted_gradient(loss) : loss;
  };
  return grad_check(objective, params.named(), {1e-6, 1e-4, 1e-6});
}

ComparisonReport compare_runs(const std::string& run_dir_a, const std::string& run_dir_b) {
  const auto read_text = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  ComparisonReport report;
  report.config_a = read_text(run_dir_a + "/config.cfg");
  report.config_b = read_text(run_dir_b + "/config.cfg");
  const RunConfig cfg_a = parse_run_config_text(report.config_a);
  const RunConfig cfg_b = parse_run_config_text(report.config_b);

  if (dataset_config_kv(cfg_a.data) != dataset_config_kv(cfg_b.data) ||
      cfg_a.dataset_path != cfg_b.dataset_path) {
    throw ContractError("compare: runs were trained on different datasets");
  }
  if (cfg_a.model.n_layers != cfg_b.model.n_layers) {
    throw ContractError("compare: models have different layer counts");
  }

  Dataset ds = obtain_dataset(cfg_a);
  const Checkpoint ck_a = load_checkpoint(run_dir_a + "/final.ckpt");
  const Checkpoint ck_b = load_checkpoint(run_dir_b + "/final.ckpt");
  ModelParams params_a = params_from_checkpoint(ck_a, "");
  ModelParams params_b = params_from_checkpoint(ck_b, "");

  const std::vector<int> layers = all_layers(cfg_a.model);
  const auto records_a = collect(params_a, ds.val, layers);
  const auto records_b = collect(params_b, ds.val, layers);

  int comparison_layer = cfg_a.model.n_layers - 1;
  for (const RunConfig* cfg : {&cfg_a, &cfg_b}) {
    if (cfg->attbalance_enabled() && !cfg->attbalance.applied_layers.empty()) {
      comparison_layer = *std::max_element(cfg->attbalance.applied_layers.begin(),
                                           cfg->attbalance.applied_layers.end());
    }
  }
  report.comparison_layer = comparison_layer;
  report.layers = layers;
  report.acc_a = accuracy(records_a, 0.5);
  report.acc_b = accuracy(records_b, 0.5);
  report.mean_in_mask_a = mean_in_mask(records_a, comparison_layer);
  report.mean_in_mask_b = mean_in_mask(records_b, comparison_layer);
  report.rho_a = layer_rho_profile(records_a).rhos;
  report.rho_b = layer_rho_profile(records_b).rhos;
  report.delta_acc = report.acc_b - report.acc_a;
  report.delta_mean_in_mask = report.mean_in_mask_b - report.mean_in_mask_a;
  return report;
}

std::string comparison_json(const ComparisonReport& report) {
  json j;
  j["comparison_layer"] = report.comparison_layer;
  j["acc_at_05"] = {{"a", report.acc_a}, {"b", report.acc_b}, {"delta", report.delta_acc}};
  j["mean_in_mask"] = {{"a", report.mean_in_mask_a},
                       {"b", report.mean_in_mask_b},
                       {"delta", report.delta_mean_in_mask}};
  j["layers"] = report.layers;
  j["rho_profile_a"] = report.rho_a;
  j["rho_profile_b"] = report.rho_b;
  j["config_a"] = report.config_a;
  j["config_b"] = report.config_b;
  return j.dump(2);
}

}  // namespace attbalance
