#include "fmtgp/fcoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

namespace fmtgp {

namespace {

constexpr double kRankTolerance = 1e-12;

void check_grid(const Eigen::VectorXd& grid) {
  if (grid.size() < 2) throw ShapeError("grid needs at least 2 points");
  for (Eigen::Index k = 1; k < grid.size(); ++k) {
    if (!(grid[k] > grid[k - 1])) throw ShapeError("grid must be strictly increasing");
  }
  if (!grid.allFinite()) throw ShapeError("grid has non-finite entries");
}

// Canonical sign: largest-magnitude entry positive. Keeps eigenvector
// orientation reproducible.
void canonicalize_columns(Eigen::MatrixXd& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::Index imax;
    m.col(c).cwiseAbs().maxCoeff(&imax);
    if (m(imax, c) < 0) m.col(c) = -m.col(c);
  }
}

// Eigenpairs of a symmetric PSD matrix, eigenvalues decreasing.
void symmetric_eigen_decreasing(const Eigen::MatrixXd& m, Eigen::VectorXd& values,
                                Eigen::MatrixXd& vectors) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw NumericalError("symmetric eigendecomposition failed");
  values = solver.eigenvalues().reverse();
  vectors = solver.eigenvectors().rowwise().reverse();
  canonicalize_columns(vectors);
}

Eigen::Index positive_count(const Eigen::VectorXd& decreasing_values) {
  double largest = decreasing_values.size() > 0 ? decreasing_values[0] : 0.0;
  double floor = kRankTolerance * std::max(largest, 1e-300);
  Eigen::Index count = 0;
  while (count < decreasing_values.size() && decreasing_values[count] > floor) ++count;
  return count;
}

}  // namespace

void FunctionalSample::validate() const {
  check_grid(grid);
  if (values.size() != grid.size()) throw ShapeError("sample values/grid length mismatch");
  if (!values.allFinite()) throw ShapeError("sample values must be finite");
}

std::string to_string(BasisKind kind) {
  switch (kind) {
    case BasisKind::kPca: return "pca";
    case BasisKind::kBspline: return "bspline";
    case BasisKind::kHaar: return "haar";
    case BasisKind::kBsplinePca: return "bspline_pca";
    case BasisKind::kHaarPca: return "haar_pca";
  }
  throw ConfigError("unknown basis kind");
}

BasisKind basis_kind_from_string(const std::string& name) {
  if (name == "pca") return BasisKind::kPca;
  if (name == "bspline") return BasisKind::kBspline;
  if (name == "haar") return BasisKind::kHaar;
  if (name == "bspline_pca") return BasisKind::kBsplinePca;
  if (name == "haar_pca") return BasisKind::kHaarPca;
  throw ConfigError("unknown encoding kind '" + name + "'");
}

Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& grid) {
  check_grid(grid);
  Eigen::Index n = grid.size();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    double h = grid[k + 1] - grid[k];
    w[k] += 0.5 * h;
    w[k + 1] += 0.5 * h;
  }
  return w;
}

Eigen::VectorXd project_onto_basis(const FunctionalSample& sample, const Basis& basis) {
  sample.validate();
  if (basis.grid.size() != sample.grid.size() ||
      (basis.grid - sample.grid).cwiseAbs().maxCoeff() > 1e-9) {
    throw ShapeError("sample grid does not match the basis grid");
  }

  Eigen::VectorXd target = sample.values;
  if (basis.mean_curve.size() > 0) target -= basis.mean_curve;

  const Eigen::VectorXd w = trapezoid_weights(basis.grid);
  const Eigen::MatrixXd& atoms = basis.atoms;
  Eigen::MatrixXd normal = atoms.transpose() * w.asDiagonal() * atoms;
  Eigen::VectorXd rhs = atoms.transpose() * (w.asDiagonal() * target);

  // Rank check on the (small) normal matrix before solving.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> spectrum(normal);
  double largest = spectrum.eigenvalues().maxCoeff();
  double smallest = spectrum.eigenvalues().minCoeff();
  if (!(largest > 0.0) || smallest <= kRankTolerance * largest) {
    throw SingularProjectionError("basis design matrix is rank deficient");
  }
  Eigen::VectorXd beta = Eigen::LDLT<Eigen::MatrixXd>(normal).solve(rhs);

  if (!basis.has_hybrid_stage()) return beta;
  Eigen::VectorXd score = basis.coeff_directions.transpose() * (beta - basis.coeff_mean);
  return score.cwiseQuotient(basis.coeff_scale);
}

Eigen::MatrixXd encode_with(const Basis& basis, const Eigen::MatrixXd& samples) {
  Eigen::MatrixXd out(samples.rows(), basis.coeff_dim());
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    FunctionalSample s{0, basis.grid, samples.row(i).transpose()};
    out.row(i) = project_onto_basis(s, basis).transpose();
  }
  return out;
}

Basis pca_fit(const Eigen::MatrixXd& samples, const Eigen::VectorXd& grid,
              const PcaTarget& target) {
  check_grid(grid);
  if (samples.cols() != grid.size()) throw ShapeError("pca_fit: samples/grid length mismatch");
  if (samples.rows() < 2) throw ShapeError("pca_fit needs at least 2 replicates");
  if (!target.dimension && !target.inertia) throw ConfigError("pca_fit: no target given");

  Eigen::VectorXd mean = samples.colwise().mean();
  Eigen::MatrixXd centered = samples.rowwise() - mean.transpose();
  Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(samples.rows());

  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  symmetric_eigen_decreasing(cov, values, vectors);

  Eigen::Index rank = positive_count(values);
  if (rank == 0) throw ReducedRankError("pca_fit: all eigenvalues are zero (constant data)");

  Eigen::Index p;
  if (target.dimension) {
    p = *target.dimension;
    if (p < 1) throw ConfigError("pca_fit: dimension must be positive");
    if (p > rank) {
      std::ostringstream msg;
      msg << "pca_fit: requested " << p << " components but only " << rank
          << " positive eigenvalues";
      throw ReducedRankError(msg.str());
    }
  } else {
    double total = values.head(rank).sum();
    double cumulative = 0.0;
    p = rank;
    for (Eigen::Index r = 0; r < rank; ++r) {
      cumulative += values[r];
      if (cumulative / total >= *target.inertia) {
        p = r + 1;
        break;
      }
    }
  }

  Basis basis;
  basis.kind = BasisKind::kPca;
  basis.grid = grid;
  basis.atoms = vectors.leftCols(p);
  basis.gram = Eigen::MatrixXd::Identity(p, p);
  basis.mean_curve = mean;
  basis.eigenvalues = values;
  return basis;
}

namespace {

// Values of the p clamped B-spline basis functions at u (Cox-de Boor, with
// the 0/0 := 0 convention; the closing knot span is treated as closed so the
// partition of unity also holds at t_hi).
Eigen::VectorXd bspline_row(const std::vector<double>& knots, int order, Eigen::Index p,
                            double u) {
  double lo = knots.front();
  double hi = knots.back();
  if (u < lo) u = lo;
  if (u > hi) u = hi;

  // Knot span index: largest k with knots[k] <= u < knots[k+1], clamped into
  // the valid range [order-1, p-1].
  Eigen::Index span;
  if (u >= hi) {
    span = p - 1;
  } else {
    span = static_cast<Eigen::Index>(
               std::upper_bound(knots.begin(), knots.end(), u) - knots.begin()) - 1;
    span = std::clamp<Eigen::Index>(span, order - 1, p - 1);
  }

  // Triangular scheme for the `order` non-vanishing functions on the span.
  std::vector<double> value(order, 0.0), left(order, 0.0), right(order, 0.0);
  value[0] = 1.0;
  for (int j = 1; j < order; ++j) {
    left[j] = u - knots[span + 1 - j];
    right[j] = knots[span + j] - u;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      double denom = right[r + 1] + left[j - r];
      double temp = denom != 0.0 ? value[r] / denom : 0.0;
      value[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    value[j] = saved;
  }

  Eigen::VectorXd row = Eigen::VectorXd::Zero(p);
  for (int j = 0; j < order; ++j) {
    Eigen::Index idx = span - order + 1 + j;
    if (idx >= 0 && idx < p) row[idx] = value[j];
  }
  return row;
}

}  // namespace

Basis bspline_basis(int order, const std::vector<double>& interior_knots, double t_lo,
                    double t_hi, const Eigen::VectorXd& grid) {
  check_grid(grid);
  if (order < 1) throw ConfigError("bspline order must be >= 1");
  if (!(t_lo < t_hi)) throw ConfigError("bspline: empty domain");
  double prev = t_lo;
  for (double tau : interior_knots) {
    if (!(tau > prev) || !(tau < t_hi)) {
      throw ConfigError("bspline: interior knots must be strictly increasing inside the domain");
    }
    prev = tau;
  }

  Eigen::Index p = static_cast<Eigen::Index>(interior_knots.size()) + order;
  std::vector<double> knots;
  knots.reserve(p + order);
  for (int k = 0; k < order; ++k) knots.push_back(t_lo);
  knots.insert(knots.end(), interior_knots.begin(), interior_knots.end());
  for (int k = 0; k < order; ++k) knots.push_back(t_hi);

  Basis basis;
  basis.kind = BasisKind::kBspline;
  basis.grid = grid;
  basis.atoms.resize(grid.size(), p);
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    basis.atoms.row(k) = bspline_row(knots, order, p, grid[k]).transpose();
  }
  Eigen::VectorXd w = trapezoid_weights(grid);
  basis.gram = basis.atoms.transpose() * w.asDiagonal() * basis.atoms;
  basis.gram = (0.5 * (basis.gram + basis.gram.transpose())).eval();
  return basis;
}

Basis bspline_basis(int order, int interior_knot_count, double t_lo, double t_hi,
                    const Eigen::VectorXd& grid) {
  if (interior_knot_count < 0) throw ConfigError("bspline: negative interior knot count");
  std::vector<double> interior(interior_knot_count);
  for (int k = 0; k < interior_knot_count; ++k) {
    interior[k] = t_lo + (t_hi - t_lo) * (k + 1) / (interior_knot_count + 1.0);
  }
  return bspline_basis(order, interior, t_lo, t_hi, grid);
}

Basis haar_basis(int level, double t_lo, double t_hi, const Eigen::VectorXd& grid) {
  check_grid(grid);
  if (level < 0) throw ConfigError("haar: level must be >= 0");
  if (!(t_lo < t_hi)) throw ConfigError("haar: empty domain");

  double length = t_hi - t_lo;
  double norm = 1.0 / std::sqrt(length);
  Eigen::Index p = Eigen::Index{2} << level;  // scaling atom + sum_{j<=level} 2^j details

  Basis basis;
  basis.kind = BasisKind::kHaar;
  basis.grid = grid;
  basis.atoms.resize(grid.size(), p);

  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    double x = (grid[k] - t_lo) / length;  // mapped to [0, 1]
    Eigen::Index col = 0;
    basis.atoms(k, col++) = (x >= 0.0 && x <= 1.0) ? norm : 0.0;
    for (int j = 0; j <= level; ++j) {
      double scale = std::pow(2.0, j);
      double amplitude = std::sqrt(scale) * norm;
      for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(scale); ++t, ++col) {
        double y = x * scale - static_cast<double>(t);  // atom-local coordinate
        double v = 0.0;
        if (y >= 0.0 && y < 0.5) v = amplitude;
        else if (y >= 0.5 && y < 1.0) v = -amplitude;
        else if (y == 1.0 && t + 1 == static_cast<Eigen::Index>(scale)) v = -amplitude;
        basis.atoms(k, col) = v;
      }
    }
  }
  // Orthonormal by construction.
  basis.gram = Eigen::MatrixXd::Identity(p, p);
  return basis;
}

CoefficientPca coefficient_pca_fit(const Eigen::MatrixXd& coeffs, int target_dim, bool whiten) {
  if (coeffs.rows() < 2) throw ShapeError("coefficient PCA needs at least 2 replicates");
  if (target_dim < 1 || target_dim > coeffs.cols()) {
    throw ReducedRankError("coefficient PCA: target dimension out of range");
  }

  CoefficientPca pca;
  pca.mean = coeffs.colwise().mean();
  Eigen::MatrixXd centered = coeffs.rowwise() - pca.mean.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(coeffs.rows());

  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  symmetric_eigen_decreasing(cov, values, vectors);

  Eigen::Index rank = positive_count(values);
  if (target_dim > rank) {
    std::ostringstream msg;
    msg << "coefficient PCA: requested " << target_dim << " directions but rank is " << rank;
    throw ReducedRankError(msg.str());
  }

  pca.directions = vectors.leftCols(target_dim);
  pca.eigenvalues = values;
  pca.scale = Eigen::VectorXd::Ones(target_dim);
  if (whiten) {
    for (int r = 0; r < target_dim; ++r) pca.scale[r] = std::sqrt(std::max(values[r], 1e-12));
  }
  return pca;
}

Eigen::MatrixXd coefficient_pca_apply(const CoefficientPca& pca, const Eigen::MatrixXd& coeffs) {
  if (coeffs.cols() != pca.directions.rows()) {
    throw ShapeError("coefficient PCA: coefficient length mismatch");
  }
  Eigen::MatrixXd scores = (coeffs.rowwise() - pca.mean.transpose()) * pca.directions;
  for (Eigen::Index r = 0; r < scores.cols(); ++r) scores.col(r) /= pca.scale[r];
  return scores;
}

Eigen::MatrixXd pca_on_coefficients(const Eigen::MatrixXd& coeffs, int target_dim) {
  CoefficientPca pca = coefficient_pca_fit(coeffs, target_dim, /*whiten=*/false);
  return coefficient_pca_apply(pca, coeffs);
}

void EncodedInputs::validate() const {
  if (bases.size() != coefficients.size()) throw ShapeError("encoded inputs: channel count mismatch");
  for (std::size_t d = 0; d < bases.size(); ++d) {
    if (coefficients[d].cols() != bases[d].coeff_dim()) {
      throw ShapeError("encoded inputs: coefficient width mismatch");
    }
    if (!coefficients[d].allFinite()) throw ShapeError("encoded inputs: non-finite coefficient");
    if (coefficients[d].rows() != coefficients[0].rows()) {
      throw ShapeError("encoded inputs: replicate count differs across channels");
    }
  }
}

double weighted_l2_sq(const EncodedInputs& a, Eigen::Index i, const EncodedInputs& b,
                      Eigen::Index i2, const Eigen::VectorXd& lengthscales) {
  if (a.channel_count() != b.channel_count()) throw ShapeError("weighted_l2_sq: channel counts differ");
  if (lengthscales.size() != a.channel_count()) throw ShapeError("weighted_l2_sq: lengthscale count");
  double total = 0.0;
  for (int d = 0; d < a.channel_count(); ++d) {
    if (a.coefficients[d].cols() != b.coefficients[d].cols()) {
      throw ShapeError("weighted_l2_sq: coefficient lengths differ");
    }
    Eigen::VectorXd diff = a.coefficients[d].row(i) - b.coefficients[d].row(i2);
    double q = diff.dot(a.bases[d].gram * diff);
    total += std::max(q, 0.0) / (lengthscales[d] * lengthscales[d]);
  }
  return total;
}

Eigen::MatrixXd channel_distance_sq(const Eigen::MatrixXd& coeff_a, const Eigen::MatrixXd& coeff_b,
                                    const Eigen::MatrixXd& gram) {
  if (coeff_a.cols() != coeff_b.cols() || gram.rows() != coeff_a.cols() ||
      gram.cols() != coeff_a.cols()) {
    throw ShapeError("channel_distance_sq: shape mismatch");
  }
  Eigen::MatrixXd cross = coeff_a * gram * coeff_b.transpose();
  Eigen::VectorXd qa(coeff_a.rows()), qb(coeff_b.rows());
  for (Eigen::Index i = 0; i < coeff_a.rows(); ++i) {
    qa[i] = coeff_a.row(i) * gram * coeff_a.row(i).transpose();
  }
  for (Eigen::Index j = 0; j < coeff_b.rows(); ++j) {
    qb[j] = coeff_b.row(j) * gram * coeff_b.row(j).transpose();
  }
  Eigen::MatrixXd dist = (-2.0 * cross).rowwise() + qb.transpose();
  dist.colwise() += qa;
  return dist.cwiseMax(0.0);
}

namespace {

// Top-`keep` atoms by total squared coefficient over the training set
// (stable order). Used by the plain Haar encoding where the level fixes
// more atoms than the target dimension.
std::vector<Eigen::Index> most_energetic_atoms(const Eigen::MatrixXd& coeffs, Eigen::Index keep) {
  Eigen::VectorXd energy = coeffs.array().square().colwise().sum();
  std::vector<Eigen::Index> order(coeffs.cols());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return energy[x] > energy[y]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

Basis fit_channel_basis(const Eigen::MatrixXd& channel, const Eigen::VectorXd& grid,
                        const EncodingConfig& config) {
  double lo = grid[0];
  double hi = grid[grid.size() - 1];
  switch (config.kind) {
    case BasisKind::kPca: {
      PcaTarget target;
      if (config.inertia) target.inertia = config.inertia;
      else target.dimension = config.dim;
      return pca_fit(channel, grid, target);
    }
    case BasisKind::kBspline: {
      if (config.dim < config.bspline_order) {
        throw ConfigError("bspline encoding: dim must be >= order");
      }
      return bspline_basis(config.bspline_order, config.dim - config.bspline_order, lo, hi, grid);
    }
    case BasisKind::kHaar: {
      Basis full = haar_basis(config.wavelet_level, lo, hi, grid);
      if (full.atoms.cols() <= config.dim) return full;
      Eigen::MatrixXd coeffs = encode_with(full, channel);
      std::vector<Eigen::Index> keep = most_energetic_atoms(coeffs, config.dim);
      Basis reduced = full;
      reduced.atoms.resize(grid.size(), config.dim);
      for (int c = 0; c < config.dim; ++c) reduced.atoms.col(c) = full.atoms.col(keep[c]);
      reduced.gram = Eigen::MatrixXd::Identity(config.dim, config.dim);
      return reduced;
    }
    case BasisKind::kBsplinePca: {
      if (config.bspline_stage_dim < std::max(config.dim, config.bspline_order)) {
        throw ConfigError("bspline_pca: stage dim must be >= max(dim, order)");
      }
      Basis stage = bspline_basis(config.bspline_order,
                                  config.bspline_stage_dim - config.bspline_order, lo, hi, grid);
      Eigen::MatrixXd coeffs = encode_with(stage, channel);
      CoefficientPca pca = coefficient_pca_fit(coeffs, config.dim, config.whiten);
      stage.kind = BasisKind::kBsplinePca;
      stage.coeff_directions = pca.directions;
      stage.coeff_mean = pca.mean;
      stage.coeff_scale = pca.scale;
      stage.coeff_eigenvalues = pca.eigenvalues;
      stage.gram = Eigen::MatrixXd::Identity(config.dim, config.dim);
      return stage;
    }
    case BasisKind::kHaarPca: {
      Basis stage = haar_basis(config.wavelet_level, lo, hi, grid);
      if (stage.atoms.cols() < config.dim) {
        throw ConfigError("haar_pca: wavelet level gives fewer atoms than dim");
      }
      Eigen::MatrixXd coeffs = encode_with(stage, channel);
      CoefficientPca pca = coefficient_pca_fit(coeffs, config.dim, config.whiten);
      stage.kind = BasisKind::kHaarPca;
      stage.coeff_directions = pca.directions;
      stage.coeff_mean = pca.mean;
      stage.coeff_scale = pca.scale;
      stage.coeff_eigenvalues = pca.eigenvalues;
      stage.gram = Eigen::MatrixXd::Identity(config.dim, config.dim);
      return stage;
    }
  }
  throw ConfigError("unknown encoding kind");
}

}  // namespace

EncodedInputs fit_encodings(const std::vector<Eigen::MatrixXd>& channels,
                            const Eigen::VectorXd& grid, const EncodingConfig& config) {
  if (channels.empty()) throw ShapeError("fit_encodings: no channels");
  EncodedInputs enc;
  for (const Eigen::MatrixXd& channel : channels) {
    Basis basis = fit_channel_basis(channel, grid, config);
    enc.coefficients.push_back(encode_with(basis, channel));
    enc.bases.push_back(std::move(basis));
  }
  enc.validate();
  return enc;
}

EncodedInputs encode_test_inputs(const EncodedInputs& enc,
                                 const std::vector<Eigen::MatrixXd>& channels,
                                 const Eigen::VectorXd& grid) {
  if (static_cast<int>(channels.size()) != enc.channel_count()) {
    throw ShapeError("encode_test_inputs: channel count mismatch");
  }
  EncodedInputs out;
  out.bases = enc.bases;
  for (std::size_t d = 0; d < channels.size(); ++d) {
    if (grid.size() != enc.bases[d].grid.size()) {
      throw ShapeError("encode_test_inputs: grid mismatch with frozen basis");
    }
    out.coefficients.push_back(encode_with(enc.bases[d], channels[d]));
  }
  out.validate();
  return out;
}

}  // namespace fmtgp
