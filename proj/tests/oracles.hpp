// Independent reference implementations used only by tests. Everything here
// is deliberately written the straightforward dense way so it shares no code
// path with the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>
#include <stdexcept>

#include "fmtgp/kernels.hpp"
#include "fmtgp/kronlin.hpp"
#include "fmtgp/mtgp.hpp"
#include "fmtgp/rng.hpp"

namespace oracles {

constexpr double kLog2Pi = 1.8378770664093453;

// Plain triple-loop Kronecker product.
inline Eigen::MatrixXd kron3(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             const Eigen::MatrixXd& c) {
  const Eigen::Index rb = b.rows(), cb = b.cols(), rc = c.rows(), cc = c.cols();
  Eigen::MatrixXd out(a.rows() * rb * rc, a.cols() * cb * cc);
  for (Eigen::Index ia = 0; ia < a.rows(); ++ia)
    for (Eigen::Index ja = 0; ja < a.cols(); ++ja)
      for (Eigen::Index ib = 0; ib < rb; ++ib)
        for (Eigen::Index jb = 0; jb < cb; ++jb)
          for (Eigen::Index ic = 0; ic < rc; ++ic)
            for (Eigen::Index jc = 0; jc < cc; ++jc)
              out((ia * rb + ib) * rc + ic, (ja * cb + jb) * cc + jc) =
                  a(ia, ja) * b(ib, jb) * c(ic, jc);
  return out;
}

inline Eigen::MatrixXd dense_covariance(const fmtgp::CovBlocks& blocks, double noise) {
  Eigen::MatrixXd k = kron3(blocks.task, blocks.functional, blocks.scalar);
  k.diagonal().array() += noise;
  return k;
}

// Dense solve with one step of iterative refinement, so the oracle's own
// rounding error stays well below the comparison tolerances even on poorly
// conditioned instances.
inline Eigen::VectorXd refined_solve(const Eigen::LLT<Eigen::MatrixXd>& llt,
                                     const Eigen::MatrixXd& k, const Eigen::VectorXd& rhs) {
  Eigen::VectorXd solved = llt.solve(rhs);
  solved += llt.solve(rhs - k * solved);
  return solved;
}

// Gaussian negative log-density of y under N(0, K + noise I).
inline double dense_nll(const fmtgp::CovBlocks& blocks, double noise, const Eigen::VectorXd& y) {
  Eigen::MatrixXd k = dense_covariance(blocks, noise);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw std::runtime_error("oracle: dense Cholesky failed");
  Eigen::MatrixXd lower = llt.matrixL();
  double logdet = 2.0 * lower.diagonal().array().log().sum();
  Eigen::VectorXd solved = refined_solve(llt, k, y);
  return 0.5 * logdet + 0.5 * y.dot(solved) + 0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

struct DensePosterior {
  double mean;
  double variance;
};

// Posterior at one test location from the explicit covariance and cross
// vector (prior variance passed in by the caller).
inline DensePosterior dense_posterior(const fmtgp::CovBlocks& blocks, double noise,
                                      const Eigen::VectorXd& y, const Eigen::VectorXd& k_star,
                                      double k_ss) {
  Eigen::MatrixXd k = dense_covariance(blocks, noise);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw std::runtime_error("oracle: dense Cholesky failed");
  Eigen::VectorXd solved_y = refined_solve(llt, k, y);
  Eigen::VectorXd solved_k = refined_solve(llt, k, k_star);
  return {k_star.dot(solved_y), k_ss + noise - k_star.dot(solved_k)};
}

// The covariance a Kronecker-Cholesky factorization actually decomposed
// (raw blocks plus any jitter it applied).
inline fmtgp::CovBlocks effective_blocks(const fmtgp::CovBlocks& blocks,
                                         const fmtgp::KroneckerCholesky& kc) {
  fmtgp::CovBlocks eff = blocks;
  eff.task.diagonal().array() += kc.jitter[0];
  eff.functional.diagonal().array() += kc.jitter[1];
  eff.scalar.diagonal().array() += kc.jitter[2];
  return eff;
}

// Textbook Cox-de Boor recursion (0/0 := 0), one basis function at a time;
// the closing interval of the clamped vector is treated as closed.
inline double bspline_recursive(const std::vector<double>& knots, int order, int r, double u) {
  if (order == 1) {
    bool last = knots[r] < knots.back() && knots[r + 1] >= knots.back();
    if (last) return (u >= knots[r] && u <= knots[r + 1]) ? 1.0 : 0.0;
    return (u >= knots[r] && u < knots[r + 1]) ? 1.0 : 0.0;
  }
  double left = 0.0, right = 0.0;
  double denom_left = knots[r + order - 1] - knots[r];
  if (denom_left > 0.0) {
    left = (u - knots[r]) / denom_left * bspline_recursive(knots, order - 1, r, u);
  }
  double denom_right = knots[r + order] - knots[r + 1];
  if (denom_right > 0.0) {
    right = (knots[r + order] - u) / denom_right * bspline_recursive(knots, order - 1, r + 1, u);
  }
  return left + right;
}

// Weighted least squares through QR on the scaled design matrix.
inline Eigen::VectorXd weighted_lsq_qr(const Eigen::MatrixXd& design, const Eigen::VectorXd& w,
                                       const Eigen::VectorXd& target) {
  Eigen::VectorXd sqrt_w = w.cwiseSqrt();
  Eigen::MatrixXd scaled = sqrt_w.asDiagonal() * design;
  Eigen::VectorXd rhs = sqrt_w.cwiseProduct(target);
  return scaled.colPivHouseholderQr().solve(rhs);
}

// Central finite differences of f at x with per-coordinate relative step.
inline Eigen::VectorXd finite_difference_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
    double h_rel = 1e-5) {
  Eigen::VectorXd grad(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    double h = h_rel * std::max(1.0, std::abs(x[k]));
    Eigen::VectorXd hi = x, lo = x;
    hi[k] += h;
    lo[k] -= h;
    grad[k] = (f(hi) - f(lo)) / (2.0 * h);
  }
  return grad;
}

// Sort-and-interpolate percentile, kept separate from the library version.
inline double percentile_bruteforce(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  double pos = q * (values.size() - 1.0);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

// Random encoded inputs with identity grams (well-spread coefficients).
inline fmtgp::EncodedInputs random_encodings(fmtgp::RandomStream& stream, Eigen::Index n,
                                             int channels, int dim, double spread = 1.0) {
  fmtgp::EncodedInputs enc;
  for (int d = 0; d < channels; ++d) {
    fmtgp::Basis basis;
    basis.kind = fmtgp::BasisKind::kPca;
    basis.grid = Eigen::VectorXd::LinSpaced(4, 0.0, 1.0);
    basis.atoms = Eigen::MatrixXd::Zero(4, dim);
    basis.gram = Eigen::MatrixXd::Identity(dim, dim);
    Eigen::MatrixXd coeff(n, dim);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < dim; ++c) coeff(i, c) = spread * stream.normal();
    enc.bases.push_back(std::move(basis));
    enc.coefficients.push_back(std::move(coeff));
  }
  return enc;
}

// A random valid lower-triangular task factor.
inline Eigen::MatrixXd random_task_lower(fmtgp::RandomStream& stream, Eigen::Index tasks) {
  Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(tasks, tasks);
  for (Eigen::Index a = 0; a < tasks; ++a) {
    for (Eigen::Index b = 0; b < a; ++b) lower(a, b) = stream.uniform(-0.8, 0.8);
    lower(a, a) = stream.uniform(0.5, 1.5);
  }
  return lower;
}

}  // namespace oracles
