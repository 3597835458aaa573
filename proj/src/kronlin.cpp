#include "fmtgp/kronlin.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "fmtgp/errors.hpp"

namespace fmtgp {

ResponseTensor::ResponseTensor(TensorShape shape, Eigen::VectorXd vec)
    : shape_(shape), data_(std::move(vec)) {
  if (data_.size() != shape_.total()) throw ShapeError("response tensor: vec length mismatch");
}

void ResponseTensor::validate_finite() const {
  if (!data_.allFinite()) throw NumericalError("response tensor has non-finite entries");
}

namespace {

using MapMatrix = Eigen::Map<Eigen::MatrixXd>;
using ConstMapMatrix = Eigen::Map<const Eigen::MatrixXd>;

void check_square(const Eigen::MatrixXd& m, const char* name) {
  if (m.rows() != m.cols() || m.rows() < 1) {
    throw ShapeError(std::string(name) + ": factor must be square and non-empty");
  }
}

Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& block, const JitterPolicy& policy,
                                     const char* name, double* applied) {
  check_square(block, name);
  if (!block.allFinite()) throw NumericalError(std::string(name) + " block has non-finite entries");
  double mean_diag = block.diagonal().mean();
  for (double scale : policy.scales) {
    double jitter = scale * mean_diag;
    Eigen::MatrixXd attempt = block;
    if (jitter > 0.0) attempt.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(attempt);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd lower = llt.matrixL();
      if ((lower.diagonal().array() > 0.0).all()) {
        *applied = jitter;
        return lower;
      }
    }
  }
  std::ostringstream msg;
  msg << name << " block is not positive definite (even with jitter up to "
      << policy.scales.back() << " * mean diagonal)";
  throw NotPositiveDefiniteError(msg.str());
}

}  // namespace

KroneckerCholesky block_cholesky(const CovBlocks& blocks, const JitterPolicy& policy) {
  if (policy.scales.empty()) throw ConfigError("jitter policy needs at least one scale");
  KroneckerCholesky kc;
  kc.task = cholesky_with_jitter(blocks.task, policy, "task", &kc.jitter[0]);
  kc.functional = cholesky_with_jitter(blocks.functional, policy, "functional", &kc.jitter[1]);
  kc.scalar = cholesky_with_jitter(blocks.scalar, policy, "scalar", &kc.jitter[2]);
  kc.log_det_l = kron_logdet(kc);
  return kc;
}

double kron_logdet(const KroneckerCholesky& kc) {
  const auto shape = kc.shape();
  auto log_diag_sum = [](const Eigen::MatrixXd& lower, const char* name) {
    if ((lower.diagonal().array() <= 0.0).any()) {
      throw NumericalError(std::string(name) + " factor has a non-positive diagonal entry");
    }
    return lower.diagonal().array().log().sum();
  };
  double s_term = static_cast<double>(shape.replicates * shape.grid) * log_diag_sum(kc.task, "task");
  double f_term =
      static_cast<double>(shape.tasks * shape.grid) * log_diag_sum(kc.functional, "functional");
  double u_term =
      static_cast<double>(shape.tasks * shape.replicates) * log_diag_sum(kc.scalar, "scalar");
  return s_term + f_term + u_term;
}

Eigen::VectorXd modewise_lower_solve(const KroneckerCholesky& kc, const ResponseTensor& y) {
  const TensorShape shape = y.shape();
  if (shape != kc.shape()) throw ShapeError("modewise_lower_solve: tensor/factor shape mismatch");

  Eigen::VectorXd x = y.vec();
  // Scalar mode: columns of the (n_u, S*n_f) view are the (s, i) slices.
  {
    MapMatrix m(x.data(), shape.grid, shape.tasks * shape.replicates);
    kc.scalar.triangularView<Eigen::Lower>().solveInPlace(m);
  }
  // Functional mode: per task, rows of the (n_u, n_f) view run over i, so
  // solving L_f along them is a right-division by L_f'.
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    MapMatrix m(x.data() + s * shape.replicates * shape.grid, shape.grid, shape.replicates);
    kc.functional.transpose().triangularView<Eigen::Upper>().solveInPlace<Eigen::OnTheRight>(m);
  }
  // Task mode: rows of the (n_f*n_u, S) view run over s.
  {
    MapMatrix m(x.data(), shape.replicates * shape.grid, shape.tasks);
    kc.task.transpose().triangularView<Eigen::Upper>().solveInPlace<Eigen::OnTheRight>(m);
  }
  return x;
}

Eigen::VectorXd modewise_upper_solve(const KroneckerCholesky& kc, const Eigen::VectorXd& x_in) {
  const TensorShape shape = kc.shape();
  if (x_in.size() != shape.total()) throw ShapeError("modewise_upper_solve: length mismatch");

  Eigen::VectorXd x = x_in;
  {
    MapMatrix m(x.data(), shape.grid, shape.tasks * shape.replicates);
    kc.scalar.transpose().triangularView<Eigen::Upper>().solveInPlace(m);
  }
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    MapMatrix m(x.data() + s * shape.replicates * shape.grid, shape.grid, shape.replicates);
    kc.functional.triangularView<Eigen::Lower>().solveInPlace<Eigen::OnTheRight>(m);
  }
  {
    MapMatrix m(x.data(), shape.replicates * shape.grid, shape.tasks);
    kc.task.triangularView<Eigen::Lower>().solveInPlace<Eigen::OnTheRight>(m);
  }
  return x;
}

Eigen::VectorXd mode_apply_grid(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                const TensorShape& shape) {
  if (x.size() != shape.total()) throw ShapeError("mode_apply_grid: length mismatch");
  if (a.cols() != shape.grid) throw ShapeError("mode_apply_grid: factor width mismatch");
  ConstMapMatrix m(x.data(), shape.grid, shape.tasks * shape.replicates);
  Eigen::MatrixXd r = a * m;
  return Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
}

Eigen::VectorXd mode_apply_replicate(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                     const TensorShape& shape) {
  if (x.size() != shape.total()) throw ShapeError("mode_apply_replicate: length mismatch");
  if (a.cols() != shape.replicates) throw ShapeError("mode_apply_replicate: factor width mismatch");
  Eigen::VectorXd out(shape.tasks * a.rows() * shape.grid);
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    ConstMapMatrix m(x.data() + s * shape.replicates * shape.grid, shape.grid, shape.replicates);
    MapMatrix r(out.data() + s * a.rows() * shape.grid, shape.grid, a.rows());
    r = m * a.transpose();
  }
  return out;
}

Eigen::VectorXd mode_apply_task(const Eigen::MatrixXd& a, const Eigen::VectorXd& x,
                                const TensorShape& shape) {
  if (x.size() != shape.total()) throw ShapeError("mode_apply_task: length mismatch");
  if (a.cols() != shape.tasks) throw ShapeError("mode_apply_task: factor width mismatch");
  ConstMapMatrix m(x.data(), shape.replicates * shape.grid, shape.tasks);
  Eigen::MatrixXd r = m * a.transpose();
  return Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
}

Eigen::VectorXd kron_matvec(const Eigen::MatrixXd& a_task, const Eigen::MatrixXd& a_rep,
                            const Eigen::MatrixXd& a_grid, const Eigen::VectorXd& x) {
  TensorShape shape{a_task.cols(), a_rep.cols(), a_grid.cols()};
  if (x.size() != shape.total()) throw ShapeError("kron_matvec: vector length mismatch");
  Eigen::VectorXd v = mode_apply_grid(a_grid, x, shape);
  shape.grid = a_grid.rows();
  v = mode_apply_replicate(a_rep, v, shape);
  shape.replicates = a_rep.rows();
  v = mode_apply_task(a_task, v, shape);
  return v;
}

Eigen::MatrixXd dense_kron3(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                            const Eigen::MatrixXd& c) {
  Eigen::MatrixXd bc(b.rows() * c.rows(), b.cols() * c.cols());
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      bc.block(i * c.rows(), j * c.cols(), c.rows(), c.cols()) = b(i, j) * c;
    }
  }
  Eigen::MatrixXd abc(a.rows() * bc.rows(), a.cols() * bc.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      abc.block(i * bc.rows(), j * bc.cols(), bc.rows(), bc.cols()) = a(i, j) * bc;
    }
  }
  return abc;
}

Eigen::VectorXd naive_apply(const Eigen::MatrixXd& a_task, const Eigen::MatrixXd& a_rep,
                            const Eigen::MatrixXd& a_grid, const Eigen::VectorXd& x) {
  Eigen::Index n_cols = a_task.cols() * a_rep.cols() * a_grid.cols();
  Eigen::Index n_rows = a_task.rows() * a_rep.rows() * a_grid.rows();
  if (x.size() != n_cols) throw ShapeError("naive_apply: vector length mismatch");
  if (std::max(n_rows, n_cols) > 20000) {
    throw NumericalError("naive_apply: size guard exceeded (n > 20000)");
  }
  return dense_kron3(a_task, a_rep, a_grid) * x;
}

Eigen::VectorXd naive_lower_solve(const Eigen::MatrixXd& l_task, const Eigen::MatrixXd& l_rep,
                                  const Eigen::MatrixXd& l_grid, const Eigen::VectorXd& y,
                                  Eigen::Index max_n) {
  check_square(l_task, "task");
  check_square(l_rep, "functional");
  check_square(l_grid, "scalar");
  const Eigen::Index s_n = l_task.rows(), f_n = l_rep.rows(), u_n = l_grid.rows();
  const Eigen::Index n = s_n * f_n * u_n;
  if (y.size() != n) throw ShapeError("naive_lower_solve: vector length mismatch");
  if (n > max_n) {
    std::ostringstream msg;
    msg << "naive_lower_solve: n = " << n << " exceeds the size guard " << max_n;
    throw NumericalError(msg.str());
  }

  Eigen::VectorXd alpha(n);
  // Row blocks of L are formed explicitly and consumed immediately: the row
  // (s,a,c) is L_S(s,:) (x) L_f(a,:) (x) L_u(c,:).
  const Eigen::Index block_rows =
      std::max<Eigen::Index>(1, std::min<Eigen::Index>(n, (64 << 20) / (8 * n)));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> block(block_rows, n);

  for (Eigen::Index r0 = 0; r0 < n; r0 += block_rows) {
    const Eigen::Index r1 = std::min(r0 + block_rows, n);
    for (Eigen::Index r = r0; r < r1; ++r) {
      const Eigen::Index s = r / (f_n * u_n);
      const Eigen::Index a = (r / u_n) % f_n;
      const Eigen::Index c = r % u_n;
      auto row = block.row(r - r0);
      for (Eigen::Index sp = 0; sp <= s; ++sp) {
        const double ls = l_task(s, sp);
        const Eigen::Index b_hi = (sp == s) ? a : f_n - 1;
        for (Eigen::Index b = 0; b <= b_hi; ++b) {
          const double coef = ls * l_rep(a, b);
          const Eigen::Index col0 = (sp * f_n + b) * u_n;
          const Eigen::Index width = (sp == s && b == a) ? c + 1 : u_n;
          row.segment(col0, width) = coef * l_grid.row(c).head(width);
        }
      }
    }
    // Contribution of already-solved unknowns, then in-block substitution.
    Eigen::VectorXd rhs = y.segment(r0, r1 - r0);
    if (r0 > 0) rhs.noalias() -= block.topLeftCorner(r1 - r0, r0) * alpha.head(r0);
    for (Eigen::Index r = r0; r < r1; ++r) {
      double acc = rhs[r - r0];
      if (r > r0) {
        acc -= block.row(r - r0).segment(r0, r - r0).dot(alpha.segment(r0, r - r0));
      }
      alpha[r] = acc / block(r - r0, r);
    }
  }
  return alpha;
}

KroneckerEigen block_eigen(const CovBlocks& blocks) {
  auto decompose = [](const Eigen::MatrixXd& block, const char* name, Eigen::MatrixXd& vectors,
                      Eigen::VectorXd& values) {
    check_square(block, name);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(block);
    if (solver.info() != Eigen::Success) {
      throw NumericalError(std::string(name) + " block eigendecomposition failed");
    }
    values = solver.eigenvalues();
    vectors = solver.eigenvectors();
    double largest = values.cwiseAbs().maxCoeff();
    if (values.minCoeff() < -1e-8 * std::max(largest, 1e-300)) {
      throw NotPositiveDefiniteError(std::string(name) + " block is indefinite");
    }
    values = values.cwiseMax(0.0);
  };
  KroneckerEigen eig;
  decompose(blocks.task, "task", eig.task_vectors, eig.task_values);
  decompose(blocks.functional, "functional", eig.functional_vectors, eig.functional_values);
  decompose(blocks.scalar, "scalar", eig.scalar_vectors, eig.scalar_values);
  return eig;
}

Eigen::VectorXd kron_eigen_apply_inverse(const KroneckerEigen& eig, double noise,
                                         const Eigen::VectorXd& v) {
  const TensorShape shape = eig.shape();
  if (v.size() != shape.total()) throw ShapeError("kron_eigen_apply_inverse: length mismatch");
  Eigen::VectorXd w =
      kron_matvec(eig.task_vectors.transpose(), eig.functional_vectors.transpose(),
                  eig.scalar_vectors.transpose(), v);
  Eigen::Index idx = 0;
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      const double sf = eig.task_values[s] * eig.functional_values[i];
      for (Eigen::Index j = 0; j < shape.grid; ++j, ++idx) {
        const double denom = sf * eig.scalar_values[j] + noise;
        if (!(denom > 0.0)) {
          throw NotPositiveDefiniteError("kron_eigen_apply_inverse: non-positive eigenvalue sum");
        }
        w[idx] /= denom;
      }
    }
  }
  return kron_matvec(eig.task_vectors, eig.functional_vectors, eig.scalar_vectors, w);
}

double kron_eigen_logdet(const KroneckerEigen& eig, double noise) {
  const TensorShape shape = eig.shape();
  double total = 0.0;
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      const double sf = eig.task_values[s] * eig.functional_values[i];
      for (Eigen::Index j = 0; j < shape.grid; ++j) {
        const double value = sf * eig.scalar_values[j] + noise;
        if (!(value > 0.0)) {
          throw NotPositiveDefiniteError("kron_eigen_logdet: non-positive eigenvalue sum");
        }
        total += std::log(value);
      }
    }
  }
  return total;
}

std::pair<Eigen::VectorXd, double> kron_eigen_solve(const CovBlocks& blocks, double noise,
                                                    const ResponseTensor& y) {
  if (noise < 0.0) throw NumericalError("kron_eigen_solve: negative noise variance");
  KroneckerEigen eig = block_eigen(blocks);
  return {kron_eigen_apply_inverse(eig, noise, y.vec()), kron_eigen_logdet(eig, noise)};
}

}  // namespace fmtgp
