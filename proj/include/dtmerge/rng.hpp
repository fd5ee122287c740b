#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dtm {

// SplitMix64 finalizer; the mixing primitive behind every derived seed.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t hash_name(std::string_view name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named substream of a root seed, e.g. derive_seed(seed, "train").
constexpr uint64_t derive_seed(uint64_t seed, std::string_view stream) { return mix64(seed ^ mix64(hash_name(stream))); }
constexpr uint64_t derive_seed(uint64_t seed, uint64_t index) { return mix64(seed ^ mix64(index + 0x5851f42d4c957f2dULL)); }

// Uniform in [0, 1) from the top 53 bits.
constexpr double bits_to_unit(uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

// Portable random source. The std:: distributions are implementation-defined,
// so the transforms here are written out to keep datasets identical across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }
  double uniform() { return bits_to_unit(engine_()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; the second variate is cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dtm
