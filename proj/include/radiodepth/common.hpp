#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace radiodepth {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Malformed configuration or arguments (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values, divergence, degenerate numerics (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File or invariant violation found while reading artifacts (CLI exit code 4).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Portable seeded generator. The standard distributions are
/// implementation-defined, so uniform and normal draws are derived here from
/// the raw 64-bit stream to keep outputs identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform direction on the unit sphere.
  Vec3 unit_vector();

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derive an independent seed for a named sub-stream of a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                          std::uint64_t index = 0);

/// Pairwise (tree) summation with a fixed split order, so that reductions
/// are reproducible regardless of how the terms were produced.
double pairwise_sum(std::span<const double> values);

/// Thread count used by parallel_for; 1 means strictly sequential.
void set_thread_count(int n);
int thread_count();

/// Runs fn(i) for i in [0, n). Each index must write only its own output
/// slot; combine results afterwards with pairwise_sum.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace radiodepth
