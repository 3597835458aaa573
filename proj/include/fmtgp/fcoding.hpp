#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fmtgp/errors.hpp"

namespace fmtgp {

// One discretized functional covariate channel: values of a curve on a
// strictly increasing grid over a compact domain.
struct FunctionalSample {
  int channel_index = 0;
  Eigen::VectorXd grid;
  Eigen::VectorXd values;

  void validate() const;
};

enum class BasisKind { kPca, kBspline, kHaar, kBsplinePca, kHaarPca };

std::string to_string(BasisKind kind);
BasisKind basis_kind_from_string(const std::string& name);

// A fitted finite basis for one channel. `atoms` holds the basis functions
// by their evaluations on `grid` (one column per atom). For the hybrid
// kinds a second linear stage (centering, rotation onto principal
// directions of the coefficients, optional whitening) follows the
// functional projection; its parameters are stored alongside so a frozen
// basis can encode unseen curves. `gram` is the matrix used by the
// weighted L2 distance in the final coefficient space.
struct Basis {
  BasisKind kind = BasisKind::kPca;
  Eigen::VectorXd grid;
  Eigen::MatrixXd atoms;
  Eigen::MatrixXd gram;
  Eigen::VectorXd mean_curve;    // PCA centering curve; empty otherwise
  Eigen::VectorXd eigenvalues;   // PCA spectrum (full, decreasing); empty otherwise

  // Hybrid stage; empty for plain kinds.
  Eigen::MatrixXd coeff_directions;  // p_full x p_reduced
  Eigen::VectorXd coeff_mean;        // p_full
  Eigen::VectorXd coeff_scale;       // p_reduced whitening divisors
  Eigen::VectorXd coeff_eigenvalues; // spectrum of the coefficient PCA

  bool has_hybrid_stage() const { return coeff_directions.size() > 0; }
  // Dimension of the final coefficient vector.
  Eigen::Index coeff_dim() const {
    return has_hybrid_stage() ? coeff_directions.cols() : atoms.cols();
  }
};

// Trapezoid quadrature weights on a strictly increasing grid.
Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& grid);

// Least-squares projection coefficients of `sample` onto `basis` via the
// normal equations with trapezoid quadrature weights. For hybrid bases the
// result is the reduced (rotated / whitened) coefficient vector.
Eigen::VectorXd project_onto_basis(const FunctionalSample& sample, const Basis& basis);

// Row-wise projection of a replicate matrix (n x n_grid) with a frozen basis.
Eigen::MatrixXd encode_with(const Basis& basis, const Eigen::MatrixXd& samples);

struct PcaTarget {
  std::optional<int> dimension;
  std::optional<double> inertia;
};

// Functional PCA: eigenvectors of the discretized empirical covariance
// (1/n) F~' F~ of the centered replicate matrix. Orthonormal atoms, identity
// gram. Either a fixed dimension or an inertia threshold selects p*.
Basis pca_fit(const Eigen::MatrixXd& samples, const Eigen::VectorXd& grid, const PcaTarget& target);

// Clamped B-spline basis of the given order with uniformly spaced interior
// knots; p = interior_knot_count + order atoms. Gram by trapezoid quadrature.
Basis bspline_basis(int order, int interior_knot_count, double t_lo, double t_hi,
                    const Eigen::VectorXd& grid);
// Same with explicit interior knots (must be strictly increasing inside (t_lo, t_hi)).
Basis bspline_basis(int order, const std::vector<double>& interior_knots, double t_lo, double t_hi,
                    const Eigen::VectorXd& grid);

// Haar system on [t_lo, t_hi): scaling atom plus detail atoms for levels
// j = 0..level, all translations. Atoms are L2-orthonormal; gram is identity.
Basis haar_basis(int level, double t_lo, double t_hi, const Eigen::VectorXd& grid);

// PCA applied to a collection of coefficient vectors (rows). Scores are the
// projections of the centered rows onto the leading directions; with
// `whiten` each direction is scaled to unit variance (divisor floored at
// 1e-12). Used by the hybrid encodings.
struct CoefficientPca {
  Eigen::MatrixXd directions;  // p_full x p_reduced
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;       // all ones when not whitened
  Eigen::VectorXd eigenvalues; // full spectrum, decreasing
};

CoefficientPca coefficient_pca_fit(const Eigen::MatrixXd& coeffs, int target_dim, bool whiten);
Eigen::MatrixXd coefficient_pca_apply(const CoefficientPca& pca, const Eigen::MatrixXd& coeffs);
// Convenience matching the one-shot operation: fit + apply, no whitening.
Eigen::MatrixXd pca_on_coefficients(const Eigen::MatrixXd& coeffs, int target_dim);

// Per-channel coefficient matrices plus their bases.
struct EncodedInputs {
  std::vector<Basis> bases;
  std::vector<Eigen::MatrixXd> coefficients;  // per channel: n_f x p_d

  int channel_count() const { return static_cast<int>(bases.size()); }
  Eigen::Index replicate_count() const {
    return coefficients.empty() ? 0 : coefficients.front().rows();
  }
  void validate() const;
};

// Squared weighted L2 distance between replicates i of `a` and i2 of `b`:
// sum_d (beta_d - beta'_d)' Phi_d (beta_d - beta'_d) / l_d^2.
double weighted_l2_sq(const EncodedInputs& a, Eigen::Index i, const EncodedInputs& b,
                      Eigen::Index i2, const Eigen::VectorXd& lengthscales);

// All pairwise Gram-weighted squared distances for one channel
// (n_a x n_b); negative round-off is clamped to zero.
Eigen::MatrixXd channel_distance_sq(const Eigen::MatrixXd& coeff_a, const Eigen::MatrixXd& coeff_b,
                                    const Eigen::MatrixXd& gram);

struct EncodingConfig {
  BasisKind kind = BasisKind::kPca;
  int dim = 6;                       // final coefficients per channel
  std::optional<double> inertia;     // PCA: overrides dim when set
  int bspline_order = 4;
  int bspline_stage_dim = 12;        // first-stage atoms for BSPLINE_PCA
  int wavelet_level = 4;
  bool whiten = true;                // hybrid coefficient PCA
};

// Fits one basis per channel on training replicates and encodes them.
// channels[d] is n_f x n_grid. For the plain Haar kind with more atoms than
// `dim`, the most energetic atoms over the training set are retained.
EncodedInputs fit_encodings(const std::vector<Eigen::MatrixXd>& channels,
                            const Eigen::VectorXd& grid, const EncodingConfig& config);

// Projects test replicates with the frozen bases of `enc`.
EncodedInputs encode_test_inputs(const EncodedInputs& enc,
                                 const std::vector<Eigen::MatrixXd>& channels,
                                 const Eigen::VectorXd& grid);

}  // namespace fmtgp
