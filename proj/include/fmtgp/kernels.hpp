#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "fmtgp/fcoding.hpp"

namespace fmtgp {

// Matern smoothness values with closed forms. The general-nu Bessel form is
// out of scope.
enum class MaternNu { kHalf, kThreeHalves, kFiveHalves, kInfinity };

std::string to_string(MaternNu nu);
MaternNu matern_nu_from_string(const std::string& name);

// sigma2 * psi_nu(r) for r >= 0 (r already lengthscale-weighted).
double matern(MaternNu nu, double sigma2, double r);
// psi'_nu(r) / r, finite at r = 0 for nu >= 3/2; callers guard r = 0 where
// the chain-rule factor vanishes anyway.
double matern_derivative_over_r(MaternNu nu, double r);

struct PeriodicSpec {
  double lengthscale = 0.5;
  double period = 1.0;
};

// exp(-(2 / l^2) sin^2(pi |u - u'| / p)), unit variance.
double periodic(const PeriodicSpec& spec, double u, double v);

enum class ScalarKernelKind { kMatern, kMaternPlusPeriodic };

std::string to_string(ScalarKernelKind kind);
ScalarKernelKind scalar_kernel_kind_from_string(const std::string& name);

struct ScalarKernelConfig {
  ScalarKernelKind kind = ScalarKernelKind::kMatern;
  MaternNu nu = MaternNu::kFiveHalves;
  PeriodicSpec periodic;  // fixed parameters; only the Matern lengthscale is learned
};

struct KernelConfig {
  MaternNu functional_nu = MaternNu::kFiveHalves;
  ScalarKernelConfig scalar;
};

// Task covariance through its Cholesky factor: K_S = L L', guaranteeing
// positive semidefiniteness.
struct TaskFactor {
  Eigen::MatrixXd lower;  // S x S, lower triangular, positive diagonal

  void validate() const;
  Eigen::MatrixXd covariance() const { return lower * lower.transpose(); }
  Eigen::Index task_count() const { return lower.rows(); }
};

// The three covariance blocks of the separable kernel. The single variance
// parameter lives on the functional block; task and scalar blocks carry no
// variance of their own (a per-block variance would not be identifiable in
// the product).
struct CovBlocks {
  Eigen::MatrixXd task;        // S x S
  Eigen::MatrixXd functional;  // n_f x n_f
  Eigen::MatrixXd scalar;      // n_u x n_u
};

// Functional block from precomputed per-channel Gram-weighted squared
// distances: entries sigma2 * psi(sqrt(sum_d D_d / l_d^2)).
Eigen::MatrixXd functional_cov(const std::vector<Eigen::MatrixXd>& channel_dist_sq,
                               const Eigen::VectorXd& lengthscales, double sigma2, MaternNu nu);

// Scalar kernel matrix between two grids; |u - u'| / l feeds the Matern
// profile, the periodic part (if any) adds with unit weight.
Eigen::MatrixXd scalar_cov(const Eigen::VectorXd& grid_a, const Eigen::VectorXd& grid_b,
                           double lengthscale, const ScalarKernelConfig& config);
// k_u(u, u): 1 for plain Matern, 2 for the additive kernel.
double scalar_cov_diag(const ScalarKernelConfig& config);

CovBlocks build_blocks(const TaskFactor& task_factor, double sigma2,
                       const Eigen::VectorXd& lengthscales_f, double lengthscale_u,
                       const EncodedInputs& enc, const Eigen::VectorXd& scalar_grid,
                       const KernelConfig& config);

// Per-channel squared distance matrices of a set of encoded inputs against
// itself; cached by callers since they do not depend on hyperparameters.
std::vector<Eigen::MatrixXd> self_distance_matrices(const EncodedInputs& enc);
std::vector<Eigen::MatrixXd> cross_distance_matrices(const EncodedInputs& test,
                                                     const EncodedInputs& train);

}  // namespace fmtgp
