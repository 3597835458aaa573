#pragma once

#include <stdexcept>
#include <string>

namespace fmtgp {

// Usage / configuration problems: bad config files, unknown keys, missing
// paths. The CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures during a run. The CLI maps these to exit code 1.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public NumericalError {
 public:
  explicit ShapeError(const std::string& msg) : NumericalError(msg) {}
};

// A covariance block failed Cholesky factorization even at maximum jitter.
class NotPositiveDefiniteError : public NumericalError {
 public:
  explicit NotPositiveDefiniteError(const std::string& msg) : NumericalError(msg) {}
};

// The basis design matrix of a projection is rank deficient.
class SingularProjectionError : public NumericalError {
 public:
  explicit SingularProjectionError(const std::string& msg) : NumericalError(msg) {}
};

// PCA was asked for more components than the data supports.
class ReducedRankError : public NumericalError {
 public:
  explicit ReducedRankError(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace fmtgp
