#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fmtgp/kronlin.hpp"
#include "fmtgp/rng.hpp"

namespace fmtgp {

// Unconstrained hyperparameter set theta = (L_S, sigma2, l_f, l_u
// [, sigma2_noise]). Positivity is enforced via exp: length-scales and
// variances are stored as logs, and so is the diagonal of the task factor;
// its strictly-lower entries are free reals.
struct Hyperparameters {
  Eigen::MatrixXd task_raw;  // S x S lower storage, diagonal in log space
  double log_sigma2 = 0.0;
  Eigen::VectorXd log_lengthscales_f;
  double log_lengthscale_u = 0.0;
  std::optional<double> log_sigma2_noise;

  Eigen::Index task_count() const { return task_raw.rows(); }
  Eigen::Index channel_count() const { return log_lengthscales_f.size(); }
  bool has_noise() const { return log_sigma2_noise.has_value(); }

  TaskFactor task_factor() const;
  double sigma2() const;
  Eigen::VectorXd lengthscales_f() const;
  double lengthscale_u() const;
  double sigma2_noise() const;  // 0 when absent

  void validate() const;

  // From natural-scale values (task_lower must be lower triangular with a
  // positive diagonal).
  static Hyperparameters from_natural(const Eigen::MatrixXd& task_lower, double sigma2,
                                      const Eigen::VectorXd& lengthscales_f, double lengthscale_u,
                                      std::optional<double> sigma2_noise = std::nullopt);
};

// Flat-vector view of the free parameters, in the fixed order: task factor
// entries (row-major lower triangle, when optimized), log sigma2, the
// functional log length-scales, the scalar log length-scale, and the log
// noise variance when present.
struct ParameterPacking {
  Eigen::Index tasks = 0;
  Eigen::Index channels = 0;
  bool optimize_task_factor = true;
  bool has_noise = false;

  Eigen::Index size() const;
  Eigen::VectorXd pack(const Hyperparameters& theta) const;
  void unpack(const Eigen::VectorXd& packed, Hyperparameters& theta) const;
  std::vector<std::string> names() const;

  static ParameterPacking for_model(const Hyperparameters& theta, bool optimize_task_factor);
};

struct MultitaskDataset {
  EncodedInputs enc;
  Eigen::VectorXd scalar_grid;
  ResponseTensor responses;  // (S, n_f, n_u)

  void validate() const;
};

// Dataset plus the theta-independent caches used by repeated likelihood
// evaluations (per-channel Gram-weighted squared distances).
struct PreparedDataset {
  MultitaskDataset data;
  KernelConfig kernel;
  std::vector<Eigen::MatrixXd> channel_dist_sq;

  static PreparedDataset make(MultitaskDataset data, const KernelConfig& kernel);
  Eigen::Index total() const { return data.responses.shape().total(); }
};

// One likelihood evaluation and the factorizations it produced. Without a
// noise parameter the Kronecker Cholesky path is used; with noise, the
// per-block eigendecomposition path.
struct NllComputation {
  double value = 0.0;
  CovBlocks blocks;  // unjittered blocks at theta
  std::optional<KroneckerCholesky> chol;
  Eigen::VectorXd alpha;  // L^{-1} y (Cholesky path)
  std::optional<KroneckerEigen> eigen;
  Eigen::VectorXd weights;  // (K + s2 I)^{-1} y
  double quad = 0.0;        // y' (K + s2 I)^{-1} y
};

NllComputation nll_compute(const Hyperparameters& theta, const PreparedDataset& prepared);
double nll(const Hyperparameters& theta, const PreparedDataset& prepared);

// Analytic gradient over the packed free parameters; optionally returns the
// objective value evaluated along the way.
Eigen::VectorXd nll_grad(const Hyperparameters& theta, const PreparedDataset& prepared,
                         const ParameterPacking& packing, double* value_out = nullptr);

struct AdamSettings {
  double learning_rate = 2e-2;
  double beta1 = 0.98;
  double beta2 = 0.999;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  double epsilon = 1e-8;
  double early_stop_tol = 1e-3;
  int early_stop_patience = 20;
  int max_iter = 500;
};

struct InitRanges {
  std::pair<double, double> lengthscale_f{0.5, 20.0};
  std::pair<double, double> lengthscale_u{0.005, 0.1};
  std::pair<double, double> sigma2{0.5, 2.0};
  std::pair<double, double> sigma2_noise{1e-3, 1e-1};
  std::pair<double, double> task_offdiag{-0.5, 0.5};
  std::pair<double, double> task_log_diag{-0.3, 0.3};
};

struct FitConfig {
  AdamSettings adam;
  InitRanges init;
  KernelConfig kernel;
  bool use_noise = false;
  // "auto": optimize the task factor only for S > 1 (an S = 1 factor is
  // redundant with sigma2 and frozen at [1], which is exactly the
  // single-task baseline).
  std::optional<bool> optimize_task_factor;
  int n_restart = 10;
  std::uint64_t seed = 0;

  bool effective_optimize_task_factor(Eigen::Index tasks) const {
    return optimize_task_factor.value_or(tasks > 1);
  }
};

struct TraceRow {
  int restart = 0;
  int iteration = 0;
  double nll = 0.0;
  double grad_norm = 0.0;
};

struct FittedModel {
  Hyperparameters theta;
  KernelConfig kernel;
  EncodedInputs enc;
  Eigen::VectorXd scalar_grid;
  ResponseTensor responses;
  double nll = 0.0;
  int restart_index = 0;

  // Prediction caches, rebuilt on load.
  CovBlocks blocks;
  std::optional<KroneckerCholesky> chol;
  Eigen::VectorXd alpha;
  std::optional<KroneckerEigen> eigen;
  Eigen::VectorXd weights;

  void build_caches();
};

// Random initialization for one restart; the draw order is fixed
// (lengthscales_f, lengthscale_u, sigma2, noise, task entries) so models
// that share a prefix of the parameter list see identical draws.
Hyperparameters draw_initialization(RandomStream& stream, Eigen::Index tasks,
                                    Eigen::Index channels, const FitConfig& config);

// Adam on the unconstrained parametrization; returns the best-NLL iterate.
FittedModel fit(const MultitaskDataset& dataset, const FitConfig& config,
                const Hyperparameters& init, std::vector<TraceRow>* trace = nullptr,
                int restart_index = 0);

// Best of n_restart seeded random initializations; restarts are
// reproducible from (seed, restart index) and may run on `jobs` threads.
FittedModel multi_start_fit(const MultitaskDataset& dataset, const FitConfig& config,
                            std::vector<TraceRow>* trace = nullptr, int jobs = 1);

// Per-task posterior mean and variance surfaces over (test replicate,
// scalar point).
struct Posterior {
  std::vector<Eigen::MatrixXd> mean;      // [task](n_test, n_ustar)
  std::vector<Eigen::MatrixXd> variance;  // same shape
};

Posterior predict(const FittedModel& model, const EncodedInputs& test_enc,
                  const Eigen::VectorXd& u_star);

// Joint prior draws of the response tensor at theta (no observation noise).
std::vector<ResponseTensor> sample_prior(const Hyperparameters& theta, const EncodedInputs& enc,
                                         const Eigen::VectorXd& scalar_grid,
                                         const KernelConfig& kernel, int n_draws,
                                         std::uint64_t seed);

}  // namespace fmtgp
