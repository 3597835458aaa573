#include <cmath>

#include <doctest.h>

#include "fmtgp/mtgp.hpp"
#include "fmtgp/rng.hpp"
#include "oracles.hpp"

using namespace fmtgp;

namespace {

struct Instance {
  MultitaskDataset data;
  Hyperparameters theta;
  KernelConfig kernel;
};

struct InstanceOptions {
  bool noise = false;
  bool additive_scalar = false;
  MaternNu nu = MaternNu::kFiveHalves;
  bool sample_y_from_prior = false;
};

Instance random_instance(RandomStream& stream, Eigen::Index tasks, Eigen::Index n_f,
                         Eigen::Index n_u, const InstanceOptions& options = {}) {
  Instance inst;
  inst.kernel.functional_nu = options.nu;
  inst.kernel.scalar.nu = options.nu == MaternNu::kHalf ? MaternNu::kFiveHalves : options.nu;
  inst.kernel.scalar.kind = options.additive_scalar ? ScalarKernelKind::kMaternPlusPeriodic
                                                    : ScalarKernelKind::kMatern;
  inst.kernel.scalar.periodic = PeriodicSpec{0.5, 1.0};

  inst.data.enc = oracles::random_encodings(stream, n_f, 2, 3, 1.2);
  inst.data.scalar_grid = Eigen::VectorXd::LinSpaced(n_u, 0.0, 1.5);

  Eigen::VectorXd ls(2);
  ls << stream.uniform(0.8, 3.0), stream.uniform(0.8, 3.0);
  inst.theta = Hyperparameters::from_natural(
      oracles::random_task_lower(stream, tasks), stream.uniform(0.5, 2.0), ls,
      stream.uniform(0.4, 1.5),
      options.noise ? std::optional<double>(stream.uniform(0.01, 0.2)) : std::nullopt);

  TensorShape shape{tasks, n_f, n_u};
  if (options.sample_y_from_prior) {
    auto draws = sample_prior(inst.theta, inst.data.enc, inst.data.scalar_grid, inst.kernel, 1,
                              stream.next_u64());
    inst.data.responses = draws.front();
    if (options.noise) {
      double sd = std::sqrt(inst.theta.sigma2_noise());
      inst.data.responses.vec() += sd * stream.normal_vector(shape.total());
    }
  } else {
    inst.data.responses = ResponseTensor(shape, stream.normal_vector(shape.total()));
  }
  return inst;
}

// Assembles the dense cross-covariance vector for a test point
// (task s, encoded row t of test_enc, scalar u_star).
Eigen::VectorXd dense_cross_vector(const Instance& inst, const CovBlocks& blocks,
                                   const EncodedInputs& test_enc, Eigen::Index t,
                                   Eigen::Index task, double u_star) {
  const Eigen::Index tasks = blocks.task.rows();
  const Eigen::Index n_f = blocks.functional.rows();
  const Eigen::Index n_u = blocks.scalar.rows();
  Eigen::MatrixXd k_f = functional_cov(cross_distance_matrices(test_enc, inst.data.enc),
                                       inst.theta.lengthscales_f(), inst.theta.sigma2(),
                                       inst.kernel.functional_nu);
  Eigen::VectorXd u_vec(1);
  u_vec << u_star;
  Eigen::MatrixXd k_u =
      scalar_cov(u_vec, inst.data.scalar_grid, inst.theta.lengthscale_u(), inst.kernel.scalar);
  Eigen::VectorXd k_star(tasks * n_f * n_u);
  for (Eigen::Index sp = 0; sp < tasks; ++sp)
    for (Eigen::Index i = 0; i < n_f; ++i)
      for (Eigen::Index j = 0; j < n_u; ++j)
        k_star[(sp * n_f + i) * n_u + j] = blocks.task(task, sp) * k_f(t, i) * k_u(0, j);
  return k_star;
}

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

}  // namespace

TEST_SUITE_BEGIN("mtgp");

TEST_CASE("parameter packing round-trips") {
  RandomStream stream(3, "packing");
  Eigen::VectorXd ls(3);
  ls << 1.0, 2.0, 3.0;
  Hyperparameters theta = Hyperparameters::from_natural(oracles::random_task_lower(stream, 3),
                                                        1.3, ls, 0.7, 0.05);
  ParameterPacking packing = ParameterPacking::for_model(theta, true);
  CHECK(packing.size() == 6 + 1 + 3 + 1 + 1);
  Eigen::VectorXd packed = packing.pack(theta);
  Hyperparameters other = theta;
  other.log_sigma2 = -99;
  other.task_raw.setZero();
  packing.unpack(packed, other);
  CHECK((packing.pack(other) - packed).cwiseAbs().maxCoeff() == 0.0);
  CHECK(packing.names().size() == static_cast<std::size_t>(packing.size()));
}

TEST_CASE("nll of zero data under an (effectively) identity covariance") {
  RandomStream stream(5, "nll-zero");
  Instance inst = random_instance(stream, 2, 4, 5);
  // push everything to the identity: unit task factor, distant encodings,
  // tiny scalar lengthscale, sigma2 = 1
  inst.theta =
      Hyperparameters::from_natural(Eigen::MatrixXd::Identity(2, 2), 1.0,
                                    Eigen::VectorXd::Constant(2, 1.0), 1e-9, std::nullopt);
  for (auto& coeff : inst.data.enc.coefficients) {
    for (Eigen::Index i = 0; i < coeff.rows(); ++i) coeff.row(i).array() += 1e6 * (i + 1);
  }
  inst.data.responses.vec().setZero();
  PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
  const double n = static_cast<double>(prepared.total());
  CHECK(nll(inst.theta, prepared) == doctest::Approx(0.5 * n * oracles::kLog2Pi).epsilon(1e-12));
}

TEST_CASE("nll matches the dense Gaussian log-density oracle") {
  RandomStream stream(7, "nll-dense");
  for (int trial = 0; trial < 8; ++trial) {
    InstanceOptions options;
    options.noise = trial % 2 == 1;
    options.additive_scalar = trial % 3 == 0;
    Instance inst = random_instance(stream, 1 + trial % 3, 4 + trial, 5 + trial, options);
    PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
    NllComputation comp = nll_compute(inst.theta, prepared);
    double expected =
        oracles::dense_nll(comp.blocks, inst.theta.sigma2_noise(), inst.data.responses.vec());
    CHECK(rel_err(comp.value, expected) < 1e-7);
  }
}

TEST_CASE("nll at the generating parameters usually beats halved lengthscales") {
  int wins = 0;
  for (int draw = 0; draw < 50; ++draw) {
    RandomStream stream(100 + draw, "nll-sanity");
    InstanceOptions options;
    options.sample_y_from_prior = true;
    Instance inst = random_instance(stream, 2, 10, 12, options);
    PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
    Hyperparameters halved = inst.theta;
    halved.log_lengthscales_f.array() -= std::log(2.0);
    halved.log_lengthscale_u -= std::log(2.0);
    if (nll(inst.theta, prepared) <= nll(halved, prepared)) ++wins;
  }
  CHECK(wins >= 45);  // >= 90% of 50 seeded draws
}

TEST_CASE("analytic gradient matches central finite differences") {
  RandomStream stream(11, "grad-fd");
  for (int trial = 0; trial < 6; ++trial) {
    InstanceOptions options;
    options.noise = trial % 2 == 1;
    options.additive_scalar = trial % 2 == 0;
    options.nu = trial % 3 == 0   ? MaternNu::kThreeHalves
                 : trial % 3 == 1 ? MaternNu::kFiveHalves
                                  : MaternNu::kInfinity;
    Instance inst = random_instance(stream, 1 + trial % 3, 5, 6, options);
    PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
    ParameterPacking packing = ParameterPacking::for_model(inst.theta, true);

    Eigen::VectorXd analytic = nll_grad(inst.theta, prepared, packing);
    Hyperparameters probe = inst.theta;
    auto objective = [&](const Eigen::VectorXd& packed) {
      packing.unpack(packed, probe);
      return nll(probe, prepared);
    };
    Eigen::VectorXd fd =
        oracles::finite_difference_gradient(objective, packing.pack(inst.theta));
    for (Eigen::Index k = 0; k < analytic.size(); ++k) {
      CHECK(rel_err(analytic[k], fd[k]) < 1e-4);
    }
  }
}

TEST_CASE("score of log_sigma2 has zero mean at the generating parameters") {
  double sum = 0.0, sum_sq = 0.0;
  const int draws = 200;
  Eigen::Index coord = -1;
  for (int draw = 0; draw < draws; ++draw) {
    RandomStream stream(500 + draw, "score");
    InstanceOptions options;
    options.sample_y_from_prior = true;
    Instance inst = random_instance(stream, 2, 6, 7, options);
    PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
    ParameterPacking packing = ParameterPacking::for_model(inst.theta, true);
    if (coord < 0) coord = packing.tasks * (packing.tasks + 1) / 2;  // log_sigma2 slot
    double g = nll_grad(inst.theta, prepared, packing)[coord];
    sum += g;
    sum_sq += g * g;
  }
  double mean = sum / draws;
  double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
  CHECK(std::abs(mean) <= 3.0 * se);
}

TEST_CASE("a lengthscale with no effect has an exactly flat gradient") {
  RandomStream stream(13, "flat");
  Instance inst = random_instance(stream, 2, 5, 6);
  inst.data.enc.coefficients[1].setZero();  // channel 1 carries no signal
  PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
  ParameterPacking packing = ParameterPacking::for_model(inst.theta, true);
  Eigen::VectorXd grad = nll_grad(inst.theta, prepared, packing);
  Eigen::Index coord = packing.tasks * (packing.tasks + 1) / 2 + 1 + 1;  // lengthscale_f[1]
  CHECK(std::abs(grad[coord]) <= 1e-10);
}

TEST_CASE("early stopping fires within patience + 1 iterations on a flat landscape") {
  RandomStream stream(17, "early-stop");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 6, 8, options);

  FitConfig config;
  config.kernel = inst.kernel;
  config.adam.learning_rate = 0.0;  // constant-NLL landscape
  config.adam.max_iter = 500;
  std::vector<TraceRow> trace;
  fit(inst.data, config, inst.theta, &trace);
  CHECK(trace.size() <= 21);
}

TEST_CASE("fit returns the best iterate and a finite trace") {
  RandomStream stream(19, "fit-small");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 12, 10, options);

  FitConfig config;
  config.kernel = inst.kernel;
  config.adam.max_iter = 60;
  std::vector<TraceRow> trace;
  FittedModel model = fit(inst.data, config, inst.theta, &trace);
  REQUIRE(!trace.empty());
  double best_seen = std::numeric_limits<double>::infinity();
  for (const TraceRow& row : trace) {
    CHECK(std::isfinite(row.nll));
    best_seen = std::min(best_seen, row.nll);
  }
  CHECK(model.nll <= best_seen + 1e-9);
}

TEST_CASE("multi-start with one restart equals the seeded single fit") {
  RandomStream stream(23, "multi-one");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 8, 8, options);

  FitConfig config;
  config.kernel = inst.kernel;
  config.adam.max_iter = 40;
  config.n_restart = 1;
  config.seed = 99;
  FittedModel multi = multi_start_fit(inst.data, config);

  RandomStream init_stream(99, "init", 0);
  Hyperparameters init = draw_initialization(init_stream, 2, 2, config);
  FittedModel single = fit(inst.data, config, init);
  CHECK(multi.nll == doctest::Approx(single.nll).epsilon(1e-12));
}

TEST_CASE("best-of-n is no worse than each individual restart") {
  RandomStream stream(29, "multi-best");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 8, 8, options);

  FitConfig config;
  config.kernel = inst.kernel;
  config.adam.max_iter = 30;
  config.n_restart = 3;
  config.seed = 7;
  FittedModel best = multi_start_fit(inst.data, config);
  for (int r = 0; r < 3; ++r) {
    RandomStream init_stream(7, "init", r);
    Hyperparameters init = draw_initialization(init_stream, 2, 2, config);
    FittedModel one = fit(inst.data, config, init, nullptr, r);
    CHECK(best.nll <= one.nll + 1e-9);
  }
}

TEST_CASE("posterior interpolates the training data without noise") {
  RandomStream stream(31, "interp");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 7, 9, options);
  FittedModel model;
  model.theta = inst.theta;
  model.kernel = inst.kernel;
  model.enc = inst.data.enc;
  model.scalar_grid = inst.data.scalar_grid;
  model.responses = inst.data.responses;
  model.build_caches();

  // test point = training replicate 3 at training grid points
  EncodedInputs test_enc = inst.data.enc;
  for (auto& coeff : test_enc.coefficients) coeff = coeff.row(3).eval();
  Posterior post = predict(model, test_enc, inst.data.scalar_grid);
  const double sigma2 = inst.theta.sigma2();
  for (Eigen::Index s = 0; s < 2; ++s) {
    for (Eigen::Index j = 0; j < 9; ++j) {
      CHECK(std::abs(post.mean[s](0, j) - inst.data.responses(s, 3, j)) < 1e-6);
      CHECK(post.variance[s](0, j) <= 1e-8 * sigma2);
      CHECK(post.variance[s](0, j) > -1e-10);
    }
  }
}

TEST_CASE("far-away test inputs revert to the prior variance") {
  RandomStream stream(37, "prior-reversion");
  InstanceOptions options;
  options.additive_scalar = false;  // k_u(u, u) = 1
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 6, 8, options);
  FittedModel model;
  model.theta = inst.theta;
  model.kernel = inst.kernel;
  model.enc = inst.data.enc;
  model.scalar_grid = inst.data.scalar_grid;
  model.responses = inst.data.responses;
  model.build_caches();

  EncodedInputs test_enc = inst.data.enc;
  for (auto& coeff : test_enc.coefficients) {
    coeff = coeff.row(0).eval();
    coeff.array() += 1e5;  // k_f ~ 0 against every training input
  }
  Eigen::VectorXd u_star(1);
  u_star << 0.7;
  Posterior post = predict(model, test_enc, u_star);
  for (Eigen::Index s = 0; s < 2; ++s) {
    double prior = inst.theta.sigma2() * model.blocks.task(s, s);
    CHECK(post.mean[s](0, 0) == doctest::Approx(0.0).epsilon(1e-8));
    CHECK(post.variance[s](0, 0) == doctest::Approx(prior).epsilon(1e-9));
  }
}

TEST_CASE("posterior matches the dense oracle, with and without noise") {
  RandomStream stream(41, "post-dense");
  for (int trial = 0; trial < 6; ++trial) {
    InstanceOptions options;
    options.noise = trial % 2 == 1;
    options.additive_scalar = trial % 3 == 0;
    Instance inst = random_instance(stream, 1 + trial % 3, 5 + trial, 6, options);
    FittedModel model;
    model.theta = inst.theta;
    model.kernel = inst.kernel;
    model.enc = inst.data.enc;
    model.scalar_grid = inst.data.scalar_grid;
    model.responses = inst.data.responses;
    model.build_caches();

    EncodedInputs test_enc = oracles::random_encodings(stream, 3, 2, 3, 1.2);
    test_enc.bases = inst.data.enc.bases;
    Eigen::VectorXd u_star(2);
    u_star << 0.33, 1.21;
    Posterior post = predict(model, test_enc, u_star);

    const double u_diag = scalar_cov_diag(inst.kernel.scalar);
    const double noise = inst.theta.sigma2_noise();
    for (Eigen::Index s = 0; s < model.blocks.task.rows(); ++s) {
      for (Eigen::Index t = 0; t < 3; ++t) {
        for (Eigen::Index j = 0; j < 2; ++j) {
          Eigen::VectorXd k_star =
              dense_cross_vector(inst, model.blocks, test_enc, t, s, u_star[j]);
          double k_ss = model.blocks.task(s, s) * inst.theta.sigma2() * u_diag;
          auto expected = oracles::dense_posterior(model.blocks, noise,
                                                   inst.data.responses.vec(), k_star, k_ss);
          CHECK(rel_err(post.mean[s](t, j), expected.mean) < 1e-7);
          CHECK(rel_err(post.variance[s](t, j), expected.variance) < 1e-7);
          // posterior never exceeds the prior variance
          CHECK(post.variance[s](t, j) <= k_ss + noise + 1e-10);
        }
      }
    }
  }
}

TEST_CASE("nll is invariant to permuting replicates coherently") {
  RandomStream stream(43, "permute");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 2, 7, 6, options);
  PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
  double base = nll(inst.theta, prepared);

  std::vector<Eigen::Index> perm{3, 0, 6, 1, 5, 2, 4};
  MultitaskDataset permuted = inst.data;
  for (auto& coeff : permuted.enc.coefficients) {
    Eigen::MatrixXd shuffled = coeff;
    for (Eigen::Index i = 0; i < 7; ++i) shuffled.row(i) = coeff.row(perm[i]);
    coeff = shuffled;
  }
  for (Eigen::Index s = 0; s < 2; ++s)
    for (Eigen::Index i = 0; i < 7; ++i)
      for (Eigen::Index j = 0; j < 6; ++j)
        permuted.responses(s, i, j) = inst.data.responses(s, perm[i], j);
  PreparedDataset prepared_perm = PreparedDataset::make(permuted, inst.kernel);
  CHECK(rel_err(nll(inst.theta, prepared_perm), base) < 1e-9);
}

TEST_CASE("single-task model equals a dense GP with the product kernel") {
  RandomStream stream(47, "single-degenerate");
  InstanceOptions options;
  options.sample_y_from_prior = true;
  Instance inst = random_instance(stream, 1, 8, 9, options);
  inst.theta.task_raw(0, 0) = 0.0;  // L_S = [1]
  PreparedDataset prepared = PreparedDataset::make(inst.data, inst.kernel);
  NllComputation comp = nll_compute(inst.theta, prepared);

  // dense single-task GP on K = K_f (x) K_u
  Eigen::MatrixXd k =
      oracles::kron3(Eigen::MatrixXd::Identity(1, 1), comp.blocks.functional, comp.blocks.scalar);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  REQUIRE(llt.info() == Eigen::Success);
  Eigen::MatrixXd lower = llt.matrixL();
  double logdet = 2.0 * lower.diagonal().array().log().sum();
  const Eigen::VectorXd& y = inst.data.responses.vec();
  double expected =
      0.5 * logdet + 0.5 * y.dot(llt.solve(y)) + 0.5 * static_cast<double>(y.size()) * oracles::kLog2Pi;
  CHECK(rel_err(comp.value, expected) < 1e-9);

  // gradient against finite differences on the dense objective is already
  // covered; here the packed gradient must agree with the S = 1 packing
  ParameterPacking packing = ParameterPacking::for_model(inst.theta, false);
  CHECK(packing.size() == 1 + 2 + 1);  // sigma2, two lengthscales, lengthscale_u
  Eigen::VectorXd grad = nll_grad(inst.theta, prepared, packing);
  CHECK(grad.allFinite());
}

TEST_CASE("prior draws reproduce the covariance diagonal and task correlation") {
  RandomStream stream(53, "prior-moments");
  Instance inst = random_instance(stream, 2, 4, 5);
  inst.theta =
      Hyperparameters::from_natural((Eigen::MatrixXd(2, 2) << 1.0, 0.0, 0.85,
                                     std::sqrt(1.0 - 0.85 * 0.85))
                                        .finished(),
                                    1.0, inst.theta.lengthscales_f(), 0.8, std::nullopt);
  const int draws = 5000;
  auto samples =
      sample_prior(inst.theta, inst.data.enc, inst.data.scalar_grid, inst.kernel, draws, 2024);

  CovBlocks blocks =
      build_blocks(inst.theta.task_factor(), inst.theta.sigma2(), inst.theta.lengthscales_f(),
                   inst.theta.lengthscale_u(), inst.data.enc, inst.data.scalar_grid, inst.kernel);
  Eigen::MatrixXd dense = oracles::kron3(blocks.task, blocks.functional, blocks.scalar);

  const Eigen::Index n = dense.rows();
  Eigen::VectorXd second_moment = Eigen::VectorXd::Zero(n);
  double cross = 0.0, var0 = 0.0, var1 = 0.0;
  const Eigen::Index half = n / 2;
  for (const ResponseTensor& draw : samples) {
    second_moment += draw.vec().cwiseAbs2();
    cross += draw.vec().head(half).dot(draw.vec().tail(half));
    var0 += draw.vec().head(half).squaredNorm();
    var1 += draw.vec().tail(half).squaredNorm();
  }
  second_moment /= draws;
  for (Eigen::Index k = 0; k < n; ++k) {
    CHECK(second_moment[k] == doctest::Approx(dense(k, k)).epsilon(0.05));
  }
  // matched coordinates of the two tasks correlate at 0.85
  double correlation = cross / std::sqrt(var0 * var1);
  CHECK(correlation == doctest::Approx(0.85).epsilon(0.06));
}

TEST_CASE("independent tasks have near-zero empirical cross correlation") {
  RandomStream stream(59, "prior-independent");
  Instance inst = random_instance(stream, 2, 4, 5);
  inst.theta = Hyperparameters::from_natural(Eigen::MatrixXd::Identity(2, 2), 1.0,
                                             inst.theta.lengthscales_f(), 0.8, std::nullopt);
  auto samples =
      sample_prior(inst.theta, inst.data.enc, inst.data.scalar_grid, inst.kernel, 4000, 77);
  double cross = 0.0, var0 = 0.0, var1 = 0.0;
  for (const ResponseTensor& draw : samples) {
    const Eigen::Index half = draw.vec().size() / 2;
    cross += draw.vec().head(half).dot(draw.vec().tail(half));
    var0 += draw.vec().head(half).squaredNorm();
    var1 += draw.vec().tail(half).squaredNorm();
  }
  CHECK(std::abs(cross / std::sqrt(var0 * var1)) < 0.05);
}

TEST_SUITE_END();
