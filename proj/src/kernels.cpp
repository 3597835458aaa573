#include "fmtgp/kernels.hpp"

#include <cmath>
#include <numbers>

#include "fmtgp/errors.hpp"

namespace fmtgp {

namespace {
const double kSqrt3 = std::sqrt(3.0);
const double kSqrt5 = std::sqrt(5.0);
}  // namespace

std::string to_string(MaternNu nu) {
  switch (nu) {
    case MaternNu::kHalf: return "0.5";
    case MaternNu::kThreeHalves: return "1.5";
    case MaternNu::kFiveHalves: return "2.5";
    case MaternNu::kInfinity: return "inf";
  }
  throw ConfigError("unknown Matern smoothness");
}

MaternNu matern_nu_from_string(const std::string& name) {
  if (name == "0.5" || name == "1/2") return MaternNu::kHalf;
  if (name == "1.5" || name == "3/2") return MaternNu::kThreeHalves;
  if (name == "2.5" || name == "5/2") return MaternNu::kFiveHalves;
  if (name == "inf" || name == "infinity") return MaternNu::kInfinity;
  throw ConfigError("unsupported Matern smoothness '" + name +
                    "' (supported: 0.5, 1.5, 2.5, inf)");
}

double matern(MaternNu nu, double sigma2, double r) {
  if (!(sigma2 > 0.0)) throw NumericalError("matern: variance must be positive");
  if (r < 0.0) throw NumericalError("matern: negative distance");
  switch (nu) {
    case MaternNu::kHalf:
      return sigma2 * std::exp(-r);
    case MaternNu::kThreeHalves:
      return sigma2 * (1.0 + kSqrt3 * r) * std::exp(-kSqrt3 * r);
    case MaternNu::kFiveHalves:
      return sigma2 * (1.0 + kSqrt5 * r + 5.0 / 3.0 * r * r) * std::exp(-kSqrt5 * r);
    case MaternNu::kInfinity:
      return sigma2 * std::exp(-0.5 * r * r);
  }
  throw ConfigError("unknown Matern smoothness");
}

double matern_derivative_over_r(MaternNu nu, double r) {
  switch (nu) {
    case MaternNu::kHalf:
      // psi' = -e^{-r}; singular over r at 0, callers only use r > 0.
      return r > 0.0 ? -std::exp(-r) / r : 0.0;
    case MaternNu::kThreeHalves:
      return -3.0 * std::exp(-kSqrt3 * r);
    case MaternNu::kFiveHalves:
      return -(5.0 / 3.0) * (1.0 + kSqrt5 * r) * std::exp(-kSqrt5 * r);
    case MaternNu::kInfinity:
      return -std::exp(-0.5 * r * r);
  }
  throw ConfigError("unknown Matern smoothness");
}

double periodic(const PeriodicSpec& spec, double u, double v) {
  if (!(spec.lengthscale > 0.0) || !(spec.period > 0.0)) {
    throw NumericalError("periodic kernel: lengthscale and period must be positive");
  }
  double s = std::sin(std::numbers::pi * std::abs(u - v) / spec.period);
  return std::exp(-2.0 / (spec.lengthscale * spec.lengthscale) * s * s);
}

std::string to_string(ScalarKernelKind kind) {
  switch (kind) {
    case ScalarKernelKind::kMatern: return "matern";
    case ScalarKernelKind::kMaternPlusPeriodic: return "matern_plus_periodic";
  }
  throw ConfigError("unknown scalar kernel kind");
}

ScalarKernelKind scalar_kernel_kind_from_string(const std::string& name) {
  if (name == "matern") return ScalarKernelKind::kMatern;
  if (name == "matern_plus_periodic") return ScalarKernelKind::kMaternPlusPeriodic;
  throw ConfigError("unknown scalar kernel kind '" + name + "'");
}

void TaskFactor::validate() const {
  if (lower.rows() != lower.cols() || lower.rows() < 1) {
    throw ShapeError("task factor must be square");
  }
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    if (!(lower(i, i) > 0.0)) throw NumericalError("task factor diagonal must be positive");
    for (Eigen::Index j = i + 1; j < lower.cols(); ++j) {
      if (lower(i, j) != 0.0) throw ShapeError("task factor must be lower triangular");
    }
  }
}

Eigen::MatrixXd functional_cov(const std::vector<Eigen::MatrixXd>& channel_dist_sq,
                               const Eigen::VectorXd& lengthscales, double sigma2, MaternNu nu) {
  if (channel_dist_sq.empty()) throw ShapeError("functional_cov: no channels");
  if (lengthscales.size() != static_cast<Eigen::Index>(channel_dist_sq.size())) {
    throw ShapeError("functional_cov: lengthscale count mismatch");
  }
  Eigen::MatrixXd r2 = Eigen::MatrixXd::Zero(channel_dist_sq[0].rows(), channel_dist_sq[0].cols());
  for (std::size_t d = 0; d < channel_dist_sq.size(); ++d) {
    double l = lengthscales[d];
    if (!(l > 0.0)) throw NumericalError("functional_cov: lengthscale must be positive");
    r2 += channel_dist_sq[d] / (l * l);
  }
  Eigen::MatrixXd k(r2.rows(), r2.cols());
  for (Eigen::Index j = 0; j < r2.cols(); ++j) {
    for (Eigen::Index i = 0; i < r2.rows(); ++i) {
      k(i, j) = matern(nu, sigma2, std::sqrt(std::max(r2(i, j), 0.0)));
    }
  }
  if (!k.allFinite()) throw NumericalError("functional_cov: non-finite entries");
  return k;
}

Eigen::MatrixXd scalar_cov(const Eigen::VectorXd& grid_a, const Eigen::VectorXd& grid_b,
                           double lengthscale, const ScalarKernelConfig& config) {
  if (!(lengthscale > 0.0)) throw NumericalError("scalar_cov: lengthscale must be positive");
  Eigen::MatrixXd k(grid_a.size(), grid_b.size());
  for (Eigen::Index j = 0; j < grid_b.size(); ++j) {
    for (Eigen::Index i = 0; i < grid_a.size(); ++i) {
      double dist = std::abs(grid_a[i] - grid_b[j]);
      double value = matern(config.nu, 1.0, dist / lengthscale);
      if (config.kind == ScalarKernelKind::kMaternPlusPeriodic) {
        value += periodic(config.periodic, grid_a[i], grid_b[j]);
      }
      k(i, j) = value;
    }
  }
  if (!k.allFinite()) throw NumericalError("scalar_cov: non-finite entries");
  return k;
}

double scalar_cov_diag(const ScalarKernelConfig& config) {
  return config.kind == ScalarKernelKind::kMaternPlusPeriodic ? 2.0 : 1.0;
}

std::vector<Eigen::MatrixXd> self_distance_matrices(const EncodedInputs& enc) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(enc.bases.size());
  for (int d = 0; d < enc.channel_count(); ++d) {
    Eigen::MatrixXd dist =
        channel_distance_sq(enc.coefficients[d], enc.coefficients[d], enc.bases[d].gram);
    // exact symmetry and zero diagonal
    dist = (0.5 * (dist + dist.transpose())).eval();
    dist.diagonal().setZero();
    out.push_back(std::move(dist));
  }
  return out;
}

std::vector<Eigen::MatrixXd> cross_distance_matrices(const EncodedInputs& test,
                                                     const EncodedInputs& train) {
  if (test.channel_count() != train.channel_count()) {
    throw ShapeError("cross_distance_matrices: channel count mismatch");
  }
  std::vector<Eigen::MatrixXd> out;
  out.reserve(train.bases.size());
  for (int d = 0; d < train.channel_count(); ++d) {
    out.push_back(
        channel_distance_sq(test.coefficients[d], train.coefficients[d], train.bases[d].gram));
  }
  return out;
}

CovBlocks build_blocks(const TaskFactor& task_factor, double sigma2,
                       const Eigen::VectorXd& lengthscales_f, double lengthscale_u,
                       const EncodedInputs& enc, const Eigen::VectorXd& scalar_grid,
                       const KernelConfig& config) {
  task_factor.validate();
  CovBlocks blocks;
  blocks.task = task_factor.covariance();
  blocks.task = (0.5 * (blocks.task + blocks.task.transpose())).eval();
  blocks.functional =
      functional_cov(self_distance_matrices(enc), lengthscales_f, sigma2, config.functional_nu);
  blocks.functional = (0.5 * (blocks.functional + blocks.functional.transpose())).eval();
  blocks.scalar = scalar_cov(scalar_grid, scalar_grid, lengthscale_u, config.scalar);
  blocks.scalar = (0.5 * (blocks.scalar + blocks.scalar.transpose())).eval();
  return blocks;
}

}  // namespace fmtgp
