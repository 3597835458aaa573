#include <cmath>

#include <doctest.h>

#include "fmtgp/synthgen.hpp"
#include "fmtgp/rng.hpp"
#include "oracles.hpp"

using namespace fmtgp;

TEST_SUITE_BEGIN("synthgen");

TEST_CASE("rayleigh curve shape") {
  // grid containing the continuous maximizer u = rho exactly
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(151, 0.0, 1.5);  // step 0.01
  const double rho = 0.5;  // lands on the grid
  const double alpha = 3.2;
  Eigen::VectorXd curve = rayleigh_curve(rho, alpha, grid);

  CHECK(curve[0] == 0.0);
  CHECK(curve.maxCoeff() == doctest::Approx(alpha).epsilon(1e-12));
  Eigen::Index argmax;
  curve.maxCoeff(&argmax);
  CHECK(grid[argmax] == doctest::Approx(rho).epsilon(1e-12));

  // unimodal: increasing before the peak, decreasing after
  for (Eigen::Index k = 1; k <= argmax; ++k) CHECK(curve[k] >= curve[k - 1]);
  for (Eigen::Index k = argmax + 1; k < curve.size(); ++k) CHECK(curve[k] <= curve[k - 1]);
}

TEST_CASE("generated inputs stay inside [0, alpha_max]") {
  RayleighConfig config;
  config.replicates = 30;
  config.scalar_points = 20;
  config.seed = 5;
  SyntheticDataset data = generate_dataset(config);
  for (const Eigen::MatrixXd& channel : data.raw.channels) {
    CHECK(channel.minCoeff() >= 0.0);
    CHECK(channel.maxCoeff() <= 4.0 + 1e-12);
  }
}

TEST_CASE("generation is deterministic under a fixed seed") {
  RayleighConfig config;
  config.replicates = 12;
  config.scalar_points = 15;
  config.seed = 123;
  SyntheticDataset a = generate_dataset(config);
  SyntheticDataset b = generate_dataset(config);
  CHECK((a.raw.responses.vec() - b.raw.responses.vec()).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t d = 0; d < a.raw.channels.size(); ++d) {
    CHECK((a.raw.channels[d] - b.raw.channels[d]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("paper-scale configuration yields 10^5 observations") {
  RayleighConfig config;  // defaults: S = 2, n_f = 500, n_u = 100
  config.seed = 9;
  SyntheticDataset data = generate_dataset(config);
  CHECK(data.raw.responses.vec().size() == 100000);
}

TEST_CASE("six PCA components capture at least 99.9% of the variance") {
  RayleighConfig config;
  config.replicates = 80;
  config.scalar_points = 10;
  config.seed = 31;
  SyntheticDataset data = generate_dataset(config);
  for (const Basis& basis : data.enc.bases) {
    double total = basis.eigenvalues.sum();
    double captured = basis.eigenvalues.head(6).sum();
    CHECK(captured / total >= 0.999);
  }
}

TEST_CASE("six whitened directions on wavelet coefficients keep ~99.9% energy") {
  RayleighConfig config;
  config.replicates = 80;
  config.scalar_points = 10;
  config.input_points = 160;
  config.seed = 37;
  SyntheticDataset data = generate_dataset(config);

  EncodingConfig encoding;
  encoding.kind = BasisKind::kHaarPca;
  encoding.dim = 6;
  encoding.wavelet_level = 4;
  EncodedInputs enc = fit_encodings(data.raw.channels, data.raw.input_grid, encoding);
  for (const Basis& basis : enc.bases) {
    double total = basis.coeff_eigenvalues.sum();
    double captured = basis.coeff_eigenvalues.head(6).sum();
    CHECK(captured / total >= 0.999);
  }
}

TEST_CASE("desk-scale outputs carry the configured inter-task correlation") {
  // A single dataset gives a noisy pooled estimate (the replicates are
  // strongly correlated at lengthscale 80), so average over seeds.
  double corr_sum = 0.0;
  const int seeds = 12;
  for (int seed = 0; seed < seeds; ++seed) {
    RayleighConfig config;
    config.replicates = 60;
    config.scalar_points = 50;
    config.seed = 41 + seed;
    SyntheticDataset data = generate_dataset(config);

    const TensorShape shape = data.raw.responses.shape();
    double cross = 0.0, var0 = 0.0, var1 = 0.0, mean0 = 0.0, mean1 = 0.0;
    const double count = static_cast<double>(shape.replicates * shape.grid);
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      for (Eigen::Index j = 0; j < shape.grid; ++j) {
        mean0 += data.raw.responses(0, i, j);
        mean1 += data.raw.responses(1, i, j);
      }
    }
    mean0 /= count;
    mean1 /= count;
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      for (Eigen::Index j = 0; j < shape.grid; ++j) {
        double a = data.raw.responses(0, i, j) - mean0;
        double b = data.raw.responses(1, i, j) - mean1;
        cross += a * b;
        var0 += a * a;
        var1 += b * b;
      }
    }
    corr_sum += cross / std::sqrt(var0 * var1);
  }
  CHECK(corr_sum / seeds == doctest::Approx(0.85).epsilon(0.07 / 0.85));
}

TEST_CASE("per-coordinate variance of prior draws follows the theory") {
  RayleighConfig config;
  config.replicates = 8;  // at least 7 so a 6-dimensional PCA exists
  config.scalar_points = 6;
  config.seed = 43;
  SyntheticDataset data = generate_dataset(config);

  const int draws = 1500;
  auto samples = sample_prior(data.theta0, data.enc, data.raw.scalar_grid, data.kernel, draws,
                              999);
  // theory: Var(Y[s,i,j]) = K_S[s,s] * sigma2 * k_u(u_j, u_j) = 1 * 1 * 2
  const double expected = 2.0;
  const double standard_error = expected * std::sqrt(2.0 / draws);
  TensorShape shape = samples.front().shape();
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    double acc = 0.0;
    for (const ResponseTensor& draw : samples) acc += draw(s, 2, 3) * draw(s, 2, 3);
    double variance = acc / draws;
    CHECK(std::abs(variance - expected) <= 3.0 * standard_error);
  }
}

TEST_CASE("invalid generator configurations are rejected") {
  RayleighConfig config;
  config.replicates = 1;
  CHECK_THROWS_AS(generate_dataset(config), ConfigError);
  config = RayleighConfig();
  config.rho_min = -0.1;
  CHECK_THROWS_AS(generate_dataset(config), ConfigError);
  config = RayleighConfig();
  config.task_cov = Eigen::MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(generate_dataset(config), ConfigError);  // tasks = 2 mismatch
}

TEST_SUITE_END();
