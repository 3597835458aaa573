#include <cmath>

#include <doctest.h>

#include "fmtgp/kernels.hpp"
#include "fmtgp/rng.hpp"
#include "oracles.hpp"

using namespace fmtgp;

TEST_SUITE_BEGIN("kernels");

TEST_CASE("matern closed forms at reference points") {
  for (MaternNu nu : {MaternNu::kHalf, MaternNu::kThreeHalves, MaternNu::kFiveHalves,
                      MaternNu::kInfinity}) {
    CHECK(matern(nu, 2.5, 0.0) == doctest::Approx(2.5).epsilon(1e-15));
  }
  // direct evaluation of the nu = 5/2 closed form at r = 1
  double expected = (1.0 + std::sqrt(5.0) + 5.0 / 3.0) * std::exp(-std::sqrt(5.0));
  CHECK(expected == doctest::Approx(0.5239941088318203).epsilon(1e-12));
  CHECK(matern(MaternNu::kFiveHalves, 1.0, 1.0) == doctest::Approx(expected).epsilon(1e-15));
  CHECK(matern(MaternNu::kFiveHalves, 1.0, 30.0) < 1e-20);
  CHECK(matern(MaternNu::kHalf, 1.0, 2.0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-15));
  CHECK(matern(MaternNu::kInfinity, 1.0, 2.0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-15));
}

TEST_CASE("matern is non-increasing in the distance") {
  RandomStream stream(5, "matern-monotone");
  std::vector<double> rs(1000);
  for (double& r : rs) r = stream.uniform(0.0, 12.0);
  std::sort(rs.begin(), rs.end());
  for (MaternNu nu : {MaternNu::kHalf, MaternNu::kThreeHalves, MaternNu::kFiveHalves,
                      MaternNu::kInfinity}) {
    double previous = matern(nu, 1.7, 0.0);
    for (double r : rs) {
      double value = matern(nu, 1.7, r);
      CHECK(value <= previous + 1e-15);
      previous = value;
    }
  }
}

TEST_CASE("matern radial derivative matches finite differences") {
  RandomStream stream(7, "matern-deriv");
  for (MaternNu nu : {MaternNu::kThreeHalves, MaternNu::kFiveHalves, MaternNu::kInfinity}) {
    for (int trial = 0; trial < 20; ++trial) {
      double r = stream.uniform(0.05, 5.0);
      double h = 1e-6 * std::max(1.0, r);
      double fd = (matern(nu, 1.0, r + h) - matern(nu, 1.0, r - h)) / (2.0 * h);
      CHECK(matern_derivative_over_r(nu, r) * r == doctest::Approx(fd).epsilon(1e-6));
    }
  }
  // exponential kernel: psi' = -exp(-r)
  CHECK(matern_derivative_over_r(MaternNu::kHalf, 2.0) * 2.0 ==
        doctest::Approx(-std::exp(-2.0)).epsilon(1e-12));
}

TEST_CASE("unsupported smoothness is rejected") {
  CHECK_THROWS_AS(matern_nu_from_string("2.0"), ConfigError);
  CHECK(matern_nu_from_string("5/2") == MaternNu::kFiveHalves);
}

TEST_CASE("periodic kernel reference values") {
  PeriodicSpec spec{0.5, 1.0};
  CHECK(periodic(spec, 0.3, 0.3) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(periodic(spec, 0.2, 1.2) == doctest::Approx(1.0).epsilon(1e-12));  // |du| = period
  // sin^2(pi/2) = 1 -> exp(-2 / 0.25) = exp(-8)
  CHECK(periodic(spec, 0.0, 0.5) == doctest::Approx(std::exp(-8.0)).epsilon(1e-12));
  CHECK(std::exp(-8.0) == doctest::Approx(3.3546262790251185e-4).epsilon(1e-12));
}

TEST_CASE("task factor reproduces the two-task correlation matrix") {
  TaskFactor factor;
  factor.lower.resize(2, 2);
  factor.lower << 1.0, 0.0, 0.85, std::sqrt(1.0 - 0.85 * 0.85);
  factor.validate();
  Eigen::MatrixXd cov = factor.covariance();
  CHECK(cov(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cov(1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cov(0, 1) == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(cov(1, 0) == doctest::Approx(0.85).epsilon(1e-15));
}

TEST_CASE("random task factors give positive semidefinite covariances") {
  RandomStream stream(11, "task-psd");
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Index tasks = 1 + static_cast<Eigen::Index>(stream.uniform(0.0, 4.0));
    TaskFactor factor{oracles::random_task_lower(stream, tasks)};
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(factor.covariance());
    CHECK(solver.eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("build_blocks matches an entrywise kernel oracle") {
  RandomStream stream(13, "blocks");
  EncodedInputs enc = oracles::random_encodings(stream, 10, 3, 4, 2.0);
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(8, 0.0, 1.5);
  Eigen::VectorXd ls(3);
  ls << 1.2, 2.5, 0.8;
  const double sigma2 = 1.7;
  const double ls_u = 0.6;

  KernelConfig config;
  config.functional_nu = MaternNu::kFiveHalves;
  config.scalar.kind = ScalarKernelKind::kMaternPlusPeriodic;
  config.scalar.nu = MaternNu::kFiveHalves;
  config.scalar.periodic = PeriodicSpec{0.5, 1.0};

  TaskFactor factor{oracles::random_task_lower(stream, 2)};
  CovBlocks blocks = build_blocks(factor, sigma2, ls, ls_u, enc, grid, config);

  // entrywise double-loop oracle for the functional block
  for (Eigen::Index i = 0; i < 10; ++i) {
    for (Eigen::Index j = 0; j < 10; ++j) {
      double r = std::sqrt(weighted_l2_sq(enc, i, enc, j, ls));
      double expected = matern(MaternNu::kFiveHalves, sigma2, r);
      CHECK(blocks.functional(i, j) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  // scalar block: Matern on |du|/l plus fixed periodic part
  for (Eigen::Index a = 0; a < 8; ++a) {
    for (Eigen::Index b = 0; b < 8; ++b) {
      double expected = matern(MaternNu::kFiveHalves, 1.0, std::abs(grid[a] - grid[b]) / ls_u) +
                        periodic(config.scalar.periodic, grid[a], grid[b]);
      CHECK(blocks.scalar(a, b) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  // exact symmetry by construction
  CHECK((blocks.functional - blocks.functional.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((blocks.scalar - blocks.scalar.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((blocks.task - blocks.task.transpose()).cwiseAbs().maxCoeff() == 0.0);

  // every block is (numerically) PSD
  for (const Eigen::MatrixXd* block : {&blocks.task, &blocks.functional, &blocks.scalar}) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(*block);
    double largest = solver.eigenvalues().maxCoeff();
    CHECK(solver.eigenvalues().minCoeff() >= -1e-8 * largest);
  }
}

TEST_CASE("single task degenerates to the product kernel") {
  RandomStream stream(17, "single-task");
  EncodedInputs enc = oracles::random_encodings(stream, 4, 1, 3);
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(5, 0.0, 1.0);
  Eigen::VectorXd ls(1);
  ls << 1.0;
  KernelConfig config;
  TaskFactor unit{Eigen::MatrixXd::Identity(1, 1)};
  CovBlocks blocks = build_blocks(unit, 1.0, ls, 0.5, enc, grid, config);
  CHECK(blocks.task.rows() == 1);
  CHECK(blocks.task(0, 0) == 1.0);
}

TEST_CASE("separable kernel is positive definite on random instances") {
  RandomStream stream(19, "separable-psd");
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Index tasks = 1 + static_cast<Eigen::Index>(stream.uniform(0.0, 3.0));
    Eigen::Index n_f = 2 + static_cast<Eigen::Index>(stream.uniform(0.0, 5.0));
    Eigen::Index n_u = 2 + static_cast<Eigen::Index>(stream.uniform(0.0, 7.0));
    EncodedInputs enc = oracles::random_encodings(stream, n_f, 2, 3, 1.5);
    Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(n_u, 0.0, 1.5);
    Eigen::VectorXd ls(2);
    ls << stream.uniform(0.5, 3.0), stream.uniform(0.5, 3.0);
    KernelConfig config;
    config.scalar.kind =
        trial % 2 ? ScalarKernelKind::kMaternPlusPeriodic : ScalarKernelKind::kMatern;
    TaskFactor factor{oracles::random_task_lower(stream, tasks)};
    CovBlocks blocks =
        build_blocks(factor, stream.uniform(0.5, 2.0), ls, stream.uniform(0.3, 2.0), enc, grid,
                     config);
    Eigen::MatrixXd dense = oracles::kron3(blocks.task, blocks.functional, blocks.scalar);
    dense.diagonal().array() += 1e-10 * dense.diagonal().mean();
    Eigen::LLT<Eigen::MatrixXd> llt(dense);
    CHECK(llt.info() == Eigen::Success);
  }
}

TEST_CASE("scalar kernel diagonal reflects the additive structure") {
  ScalarKernelConfig matern_only;
  CHECK(scalar_cov_diag(matern_only) == 1.0);
  ScalarKernelConfig additive;
  additive.kind = ScalarKernelKind::kMaternPlusPeriodic;
  CHECK(scalar_cov_diag(additive) == 2.0);
}

TEST_SUITE_END();
