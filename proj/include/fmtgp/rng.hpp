#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace fmtgp {

// Deterministic random streams. Every consumer derives its own stream from
// (root seed, purpose name, index), so adding draws in one part of a run
// never shifts the values seen elsewhere. All mappings from raw engine
// output to doubles are spelled out here rather than delegated to
// std::*_distribution, whose algorithms are implementation-defined.
class RandomStream {
 public:
  RandomStream(std::uint64_t root_seed, std::string_view purpose, std::uint64_t index = 0);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller; generated in pairs, second value cached.
  double normal();
  Eigen::VectorXd normal_vector(Eigen::Index n);

  // Seed for a dependent substream.
  std::uint64_t derive(std::string_view purpose, std::uint64_t index = 0) const;

  static std::uint64_t mix_seed(std::uint64_t root, std::string_view purpose, std::uint64_t index);

 private:
  std::uint64_t stream_seed_;
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace fmtgp
