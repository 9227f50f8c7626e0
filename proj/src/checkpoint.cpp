#include "attbalance/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "attbalance/binio.hpp"

namespace attbalance {

namespace {

constexpr char kMagic[8] = {'A', 'T', 'B', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void put_kv_block(std::string& buf, const KvPairs& kv) {
  binio::put_u32(buf, static_cast<std::uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) {
    binio::put_str(buf, k);
    binio::put_str(buf, v);
  }
}

KvPairs read_kv_block(binio::Reader& r) {
  KvPairs kv;
  const std::uint32_t n = r.u32();
  kv.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    kv.emplace_back(std::move(k), std::move(v));
  }
  return kv;
}

}  // namespace

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  binio::put_u32(buf, kVersion);
  put_kv_block(buf, ckpt.model_config);
  put_kv_block(buf, ckpt.run_config);
  binio::put_u64(buf, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    binio::put_str(buf, name);
    binio::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (const int d : t.shape()) binio::put_u64(buf, static_cast<std::uint64_t>(d));
    for (const double v : t.data()) binio::put_f64(buf, v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.size() < sizeof(kMagic) ||
      std::memcmp(content.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not an attbalance checkpoint: " + path);
  }
  binio::Reader r{content, sizeof(kMagic)};
  if (r.u32() != kVersion) throw IoError("unsupported checkpoint version in " + path);
  Checkpoint ckpt;
  ckpt.model_config = read_kv_block(r);
  ckpt.run_config = read_kv_block(r);
  const std::uint64_t n_tensors = r.u64();
  ckpt.tensors.reserve(n_tensors);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u64());
    const std::size_t numel = shape_numel(shape);
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64();
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor::from_data(std::move(shape), std::move(data)));
  }
  return ckpt;
}

void append_params(std::vector<std::pair<std::string, Tensor>>& out, const ModelParams& params,
                   const std::string& prefix) {
  for (const auto& [name, t] : params.named()) out.emplace_back(prefix + name, t);
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const ModelConfig config = model_config_from_kv(ckpt.model_config);
  ModelParams params = allocate_params(config);
  for (auto& [name, t] : params.named()) {
    const Tensor* stored = ckpt.find_tensor(prefix + name);
    if (!stored) throw IoError("checkpoint is missing tensor " + prefix + name);
    if (stored->shape() != t.shape()) {
      throw IoError("checkpoint tensor " + prefix + name + " has shape " +
                    shape_str(stored->shape()) + ", expected " + shape_str(t.shape()));
    }
    Tensor dst = t;
    dst.data() = stored->data();
  }
  return params;
}

bool has_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

}  // namespace attbalance
