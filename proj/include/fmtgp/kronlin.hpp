#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fmtgp/kernels.hpp"

namespace fmtgp {

// Shape of the response tensor: tasks x functional replicates x scalar grid.
struct TensorShape {
  Eigen::Index tasks = 0;
  Eigen::Index replicates = 0;
  Eigen::Index grid = 0;

  Eigen::Index total() const { return tasks * replicates * grid; }
  bool operator==(const TensorShape&) const = default;
};

// Response tensor with the vectorization order pinned project-wide: the task
// index is outermost, then the functional replicate, then the scalar index
// (fastest). This is the column-major vec convention under which
// vec(Y x_u A_u x_f A_f x_S A_S) = (A_S (x) A_f (x) A_u) vec(Y).
class ResponseTensor {
 public:
  ResponseTensor() = default;
  explicit ResponseTensor(TensorShape shape)
      : shape_(shape), data_(Eigen::VectorXd::Zero(shape.total())) {}
  ResponseTensor(TensorShape shape, Eigen::VectorXd vec);

  const TensorShape& shape() const { return shape_; }
  double operator()(Eigen::Index s, Eigen::Index i, Eigen::Index j) const {
    return data_[(s * shape_.replicates + i) * shape_.grid + j];
  }
  double& operator()(Eigen::Index s, Eigen::Index i, Eigen::Index j) {
    return data_[(s * shape_.replicates + i) * shape_.grid + j];
  }
  const Eigen::VectorXd& vec() const { return data_; }
  Eigen::VectorXd& vec() { return data_; }

  void validate_finite() const;

 private:
  TensorShape shape_;
  Eigen::VectorXd data_;
};

// Jitter added to a block that fails Cholesky: scale * mean(diag), with the
// scale escalating through the list before giving up.
struct JitterPolicy {
  std::vector<double> scales{0.0, 1e-10, 1e-8, 1e-6};
};

// Cholesky factors of the three covariance blocks. Their Kronecker product
// L_S (x) L_f (x) L_u is the Cholesky factor of the full covariance; it is
// never formed.
struct KroneckerCholesky {
  Eigen::MatrixXd task;        // L_S
  Eigen::MatrixXd functional;  // L_f
  Eigen::MatrixXd scalar;      // L_u
  std::array<double, 3> jitter{0.0, 0.0, 0.0};  // applied per block
  double log_det_l = 0.0;                       // cached closed form

  TensorShape shape() const {
    return {task.rows(), functional.rows(), scalar.rows()};
  }
};

KroneckerCholesky block_cholesky(const CovBlocks& blocks, const JitterPolicy& policy = {});

// log|L| = n_f n_u sum log diag(L_S) + S n_u sum log diag(L_f)
//        + S n_f sum log diag(L_u).
double kron_logdet(const KroneckerCholesky& kc);

// alpha = L^{-1} vec(y) through mode-wise forward substitutions (scalar mode
// first, then functional, then task); L is never materialized.
Eigen::VectorXd modewise_lower_solve(const KroneckerCholesky& kc, const ResponseTensor& y);
// L^{-T} x through the transposed mode-wise solves; composing both gives K^{-1}.
Eigen::VectorXd modewise_upper_solve(const KroneckerCholesky& kc, const Eigen::VectorXd& x);

// (A_task (x) A_rep (x) A_grid) x via mode products; factors may be
// rectangular (cols must match the shape implied by x).
Eigen::VectorXd kron_matvec(const Eigen::MatrixXd& a_task, const Eigen::MatrixXd& a_rep,
                            const Eigen::MatrixXd& a_grid, const Eigen::VectorXd& x);

// Dense Kronecker product of three factors; memory grows as the product of
// all dimensions, callers guard sizes.
Eigen::MatrixXd dense_kron3(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                            const Eigen::MatrixXd& c);

// Benchmark / oracle foil: materializes the full Kronecker matrix and
// multiplies densely. Guarded at n <= 20000.
Eigen::VectorXd naive_apply(const Eigen::MatrixXd& a_task, const Eigen::MatrixXd& a_rep,
                            const Eigen::MatrixXd& a_grid, const Eigen::VectorXd& x);

// Naive dense forward substitution for L alpha = y with
// L = L_S (x) L_f (x) L_u. Row blocks of L are materialized on the fly so
// the O(n^2) dense work runs in bounded memory; this is the benchmark's
// "explicitly form the Kronecker product" arm.
Eigen::VectorXd naive_lower_solve(const Eigen::MatrixXd& l_task, const Eigen::MatrixXd& l_rep,
                                  const Eigen::MatrixXd& l_grid, const Eigen::VectorXd& y,
                                  Eigen::Index max_n = 60000);

// Symmetric eigendecompositions of the three blocks, for the noise path:
// K + s2 I = Q (Lambda + s2 I) Q' with Q = Q_S (x) Q_f (x) Q_u.
struct KroneckerEigen {
  Eigen::MatrixXd task_vectors, functional_vectors, scalar_vectors;
  Eigen::VectorXd task_values, functional_values, scalar_values;

  TensorShape shape() const {
    return {task_vectors.rows(), functional_vectors.rows(), scalar_vectors.rows()};
  }
};

KroneckerEigen block_eigen(const CovBlocks& blocks);

// (K + noise I)^{-1} v through the eigenbasis.
Eigen::VectorXd kron_eigen_apply_inverse(const KroneckerEigen& eig, double noise,
                                         const Eigen::VectorXd& v);
// log|K + noise I| = sum over the triple index of log(l_S l_f l_u + noise).
double kron_eigen_logdet(const KroneckerEigen& eig, double noise);

// Convenience: solve and log-determinant in one call.
std::pair<Eigen::VectorXd, double> kron_eigen_solve(const CovBlocks& blocks, double noise,
                                                    const ResponseTensor& y);

// Mode products on the flat tensor layout (building blocks for the above
// and for batched posterior contractions). Each returns the new flat vector;
// the mode's dimension becomes a.rows().
Eigen::VectorXd mode_apply_task(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                const TensorShape& shape);
Eigen::VectorXd mode_apply_replicate(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                     const TensorShape& shape);
Eigen::VectorXd mode_apply_grid(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                const TensorShape& shape);

}  // namespace fmtgp
