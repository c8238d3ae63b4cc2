#include "amr/rng.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace amr {

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  if (stddev == 0.0) return mean;
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

double Rng::gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

bool Rng::bernoulli(double p) { return uniform() < p; }

std::int64_t Rng::index(std::int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::index: n must be positive");
  return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
}

std::vector<std::int64_t> Rng::permutation(std::int64_t n) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = std::uniform_int_distribution<std::int64_t>(0, i)(engine_);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

std::string Rng::serialize() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng.engine_;
  if (in.fail()) throw std::runtime_error("Rng::deserialize: malformed engine state");
  return rng;
}

}  // namespace amr
