#include "attbalance/config.hpp"

#include <fstream>
#include <sstream>

namespace attbalance {

void OptimConfig::validate() const {
  if (optimizer != "sgd" && optimizer != "adam") {
    throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + optimizer + "'");
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

void RunConfig::validate() const {
  if (mode != "baseline" && mode != "attbalance") {
    throw ConfigError("mode must be 'baseline' or 'attbalance', got '" + mode + "'");
  }
  model.validate();
  data.validate();
  opt.validate();
  if (attbalance_enabled()) {
    attbalance.validate();
    for (const int l : attbalance.applied_layers) {
      if (l < 0 || l >= model.n_layers) {
        throw ConfigError("applied layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(model.n_layers) + ")");
      }
    }
  }
  for (const int l : eval_capture_layers) {
    if (l < 0 || l >= model.n_layers) {
      throw ConfigError("eval capture layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(model.n_layers) + ")");
    }
  }
  if (model.grid_h != data.grid_h || model.grid_w != data.grid_w) {
    throw ConfigError("model grid does not match dataset grid");
  }
  if (model.visual_feature_dim != vocab::feature_dim()) {
    throw ConfigError("model visual_feature_dim must be " +
                      std::to_string(vocab::feature_dim()) + " for the synthetic task");
  }
  if (model.vocab_size < vocab::size()) {
    throw ConfigError("model vocab_size must cover the task vocabulary of " +
                      std::to_string(vocab::size()));
  }
}

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

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

KvPairs optim_config_kv(const OptimConfig& c) {
  return {
      {"optimizer", c.optimizer},
      {"lr", format_double(c.lr)},
      {"epochs", format_int(c.epochs)},
      {"batch_size", format_int(c.batch_size)},
      {"grad_clip", format_double(c.grad_clip)},
      {"seed", format_u64(c.seed)},
      {"adam_beta1", format_double(c.adam_beta1)},
      {"adam_beta2", format_double(c.adam_beta2)},
      {"adam_eps", format_double(c.adam_eps)},
  };
}

bool apply_optim_config_kv(OptimConfig& c, const std::string& key, const std::string& value) {
  if (key == "optimizer") c.optimizer = value;
  else if (key == "lr") c.lr = parse_double(value);
  else if (key == "epochs") c.epochs = static_cast<int>(parse_int(value));
  else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(value));
  else if (key == "grad_clip") c.grad_clip = parse_double(value);
  else if (key == "seed") c.seed = parse_u64(value);
  else if (key == "adam_beta1") c.adam_beta1 = parse_double(value);
  else if (key == "adam_beta2") c.adam_beta2 = parse_double(value);
  else if (key == "adam_eps") c.adam_eps = parse_double(value);
  else return false;
  return true;
}

KvPairs run_config_kv(const RunConfig& c) {
  KvPairs kv;
  kv.emplace_back("mode", c.mode);
  kv.emplace_back("out_dir", c.out_dir);
  kv.emplace_back("dataset_path", c.dataset_path);
  kv.emplace_back("eval_every", format_int(c.eval_every));
  kv.emplace_back("checkpoint_every", format_int(c.checkpoint_every));
  kv.emplace_back("eval_capture_layers", layers_to_string(c.eval_capture_layers));
  kv.emplace_back("log_timing", format_bool(c.log_timing));
  for (const auto& [k, v] : model_config_kv(c.model)) kv.emplace_back("model." + k, v);
  for (const auto& [k, v] : attbalance_config_kv(c.attbalance)) {
    kv.emplace_back("attbalance." + k, v);
  }
  for (const auto& [k, v] : dataset_config_kv(c.data)) kv.emplace_back("data." + k, v);
  for (const auto& [k, v] : optim_config_kv(c.opt)) kv.emplace_back("opt." + k, v);
  return kv;
}

void apply_run_config_kv(RunConfig& c, const std::string& key, const std::string& value) {
  const auto strip_prefix = [&](const char* prefix) -> std::string {
    const std::string p(prefix);
    return key.substr(p.size());
  };
  if (key.rfind("model.", 0) == 0) {
    if (!apply_model_config_kv(c.model, strip_prefix("model."), value)) {
      throw ConfigError("unknown config key: " + key);
    }
  } else if (key.rfind("attbalance.", 0) == 0) {
    if (!apply_attbalance_config_kv(c.attbalance, strip_prefix("attbalance."), value)) {
      throw ConfigError("unknown config key: " + key);
    }
  } else if (key.rfind("data.", 0) == 0) {
    if (!apply_dataset_config_kv(c.data, strip_prefix("data."), value)) {
      throw ConfigError("unknown config key: " + key);
    }
  } else if (key.rfind("opt.", 0) == 0) {
    if (!apply_optim_config_kv(c.opt, strip_prefix("opt."), value)) {
      throw ConfigError("unknown config key: " + key);
    }
  } else if (key == "mode") {
    c.mode = value;
  } else if (key == "out_dir") {
    c.out_dir = value;
  } else if (key == "dataset_path") {
    c.dataset_path = value;
  } else if (key == "eval_every") {
    c.eval_every = static_cast<int>(parse_int(value));
  } else if (key == "checkpoint_every") {
    c.checkpoint_every = static_cast<int>(parse_int(value));
  } else if (key == "eval_capture_layers") {
    c.eval_capture_layers = layers_from_string(value);
  } else if (key == "log_timing") {
    c.log_timing = parse_bool(value);
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

RunConfig run_config_from_kv(const KvPairs& kv) {
  RunConfig c;
  for (const auto& [k, v] : kv) apply_run_config_kv(c, k, v);
  return c;
}

RunConfig parse_run_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " is not 'key = value'");
    }
    apply_run_config_kv(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config_text(text);
}

std::string run_config_text(const RunConfig& c) {
  std::ostringstream out;
  for (const auto& [k, v] : run_config_kv(c)) out << k << " = " << v << '\n';
  return out.str();
}

void apply_config_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  }
  apply_run_config_kv(c, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

}  // namespace attbalance
