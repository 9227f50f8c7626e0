#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace attbalance {

// Self-contained xoshiro256** generator. All stochastic behavior in the
// project flows through this type so that runs are reproducible bit-for-bit
// across standard libraries (std distributions are implementation-defined).
//
// Substreams are derived from the original seed and a name, not from the
// evolving state, so consumers can be reordered without perturbing each
// other's draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    // splitmix64 expansion of the seed into the xoshiro state.
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds, unbiased via rejection.
  int uniform_int(int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % range);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    // Box-Muller; 1-u keeps the log argument in (0, 1].
    const double u = 1.0 - uniform();
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double theta = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const int j = uniform_int(0, static_cast<int>(i) - 1);
      std::swap(v[i - 1], v[static_cast<std::size_t>(j)]);
    }
  }

  std::uint64_t seed() const { return seed_; }

  Rng substream(std::string_view name) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (const char c : name) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ull;
    }
    std::uint64_t x = seed_ ^ h;
    return Rng(splitmix(x));
  }

  Rng substream(std::string_view name, std::uint64_t index) const {
    std::uint64_t x = substream(name).seed() ^ (index * 0x9e3779b97f4a7c15ull);
    return Rng(splitmix(x));
  }

 private:
  static std::uint64_t splitmix(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace attbalance
