#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace amr {

/// Seeded random source used for every stochastic decision in training and
/// evaluation (partners, mixing weights, masks, ablation, batch order).
///
/// Distribution objects are created per call so the whole state lives in the
/// engine; `serialize` / `deserialize` therefore capture it exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal(double mean, double stddev);
  /// Gamma(shape, 1).
  double gamma(double shape);
  bool bernoulli(double p);
  /// Uniform index in [0, n).
  std::int64_t index(std::int64_t n);
  /// Uniform random permutation of 0..n-1 (Fisher-Yates).
  std::vector<std::int64_t> permutation(std::int64_t n);
  /// Fresh 64-bit value, used to derive child seeds.
  std::uint64_t next_u64() { return engine_(); }

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  std::mt19937_64& engine() { return engine_; }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace amr
