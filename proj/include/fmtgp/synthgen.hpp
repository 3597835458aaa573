#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "fmtgp/mtgp.hpp"

namespace fmtgp {

// Raw (pre-encoding) dataset: per-channel replicate matrices on a common
// input grid, plus the response tensor on the scalar grid.
struct RawDataset {
  std::vector<Eigen::MatrixXd> channels;  // d_f entries, each n_f x n_grid_in
  Eigen::VectorXd input_grid;
  Eigen::VectorXd scalar_grid;
  ResponseTensor responses;

  Eigen::Index replicate_count() const {
    return channels.empty() ? 0 : channels.front().rows();
  }
  void validate() const;
};

// Configuration of the Rayleigh synthetic benchmark: random Rayleigh-shaped
// input curves on a fixed grid, responses drawn jointly from a baseline
// model with known hyperparameters.
struct RayleighConfig {
  int replicates = 500;     // n_f
  int tasks = 2;            // S
  int scalar_points = 100;  // n_u
  int input_points = 150;
  double u_min = 0.0;
  double u_max = 1.5;
  double rho_min = 0.05, rho_max = 1.0;
  double alpha_min = 2.0, alpha_max = 4.0;

  // Ground truth.
  Eigen::MatrixXd task_cov;          // defaults to [[1, .85], [.85, 1]]
  double sigma2 = 1.0;
  Eigen::VectorXd lengthscales_f;    // defaults to (80, 80, 80)
  double lengthscale_u = 1.5;
  KernelConfig kernel;               // defaults to Matern-5/2 + periodic(0.5, 1)
  double noise_sigma2 = 0.0;         // additive observation noise, 0 = noiseless

  int encoding_dim = 6;              // PCA dimension used when sampling responses
  std::uint64_t seed = 0;

  RayleighConfig();
  int channel_count() const { return 3; }
  void validate() const;
};

// alpha * h_rho(u) / max_grid h_rho(u) with h_rho(u) = (u / rho^2)
// exp(-u^2 / (2 rho^2)); the maximum is taken over the discrete grid.
Eigen::VectorXd rayleigh_curve(double rho, double alpha, const Eigen::VectorXd& grid);

struct SyntheticDataset {
  RawDataset raw;
  Hyperparameters theta0;
  KernelConfig kernel;
  EncodedInputs enc;  // the PCA encoding the generator sampled through
};

SyntheticDataset generate_dataset(const RayleighConfig& config);

}  // namespace fmtgp
