#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace rlcf {

/// Mixes a base seed with a stream id so that independent components draw
/// from non-overlapping streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Seeded generator with distribution code pinned here rather than taken
/// from the standard library, so sequences are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  /// Unit vector drawn uniformly from the sphere.
  std::vector<double> unit_vector(std::size_t dim);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rlcf
