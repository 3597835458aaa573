#include <cstdio>
#include <filesystem>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "fmtgp/config.hpp"
#include "fmtgp/dataio.hpp"
#include "fmtgp/experiments.hpp"
#include "fmtgp/rng.hpp"
#include "oracles.hpp"

using namespace fmtgp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("fmtgp_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE_BEGIN("config");

TEST_CASE("defaults are filled and the schema round-trips") {
  json j = {{"seed", 7},
            {"generator", {{"replicates", 20}, {"scalar_points", 12}}},
            {"optimizer", {{"max_iter", 50}}}};
  ExperimentConfig config = config_from_json(j);
  CHECK(config.seed == 7);
  CHECK(config.generator.replicates == 20);
  CHECK(config.generator.lengthscales_f[0] == 80.0);
  CHECK(config.optimizer.adam.max_iter == 50);
  CHECK(config.optimizer.adam.learning_rate == doctest::Approx(2e-2));
  CHECK(config.optimizer.adam.beta1 == doctest::Approx(0.98));
  CHECK(config.optimizer.adam.weight_decay == doctest::Approx(1e-5));
  CHECK(config.evaluation.delta == doctest::Approx(1.96));

  // echoed config reproduces itself
  json echoed = config_to_json(config);
  ExperimentConfig again = config_from_json(echoed);
  CHECK(config_to_json(again) == echoed);
}

TEST_CASE("unknown keys are rejected at any depth") {
  CHECK_THROWS_AS(config_from_json(json{{"sede", 7}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"generator", {{"replicate", 20}}}}), ConfigError);
  CHECK_THROWS_AS(
      config_from_json(json{{"optimizer", {{"init", {{"lengthscales", {1, 2}}}}}}}),
      ConfigError);
}

TEST_CASE("malformed values are configuration errors") {
  CHECK_THROWS_AS(config_from_json(json{{"jobs", 0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"optimizer", {{"n_restart", 0}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"encoding", {{"kind", "fourier"}}}}), ConfigError);
  CHECK_THROWS_AS(
      config_from_json(json{{"optimizer", {{"init", {{"sigma2", {1.0}}}}}}}),
      ConfigError);
}

TEST_CASE("channel CSV round-trips bit-exactly") {
  fs::path dir = temp_dir("channel_csv");
  RandomStream stream(3, "csv");
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(40, 0.0, 1.5);
  Eigen::MatrixXd samples(6, 40);
  for (int i = 0; i < 6; ++i)
    for (int k = 0; k < 40; ++k) samples(i, k) = stream.normal();

  write_channel_csv(dir / "channel.csv", grid, samples);
  auto [grid2, samples2] = read_channel_csv(dir / "channel.csv");
  CHECK((grid - grid2).cwiseAbs().maxCoeff() == 0.0);
  CHECK((samples - samples2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("outputs CSV round-trips and validates structure") {
  fs::path dir = temp_dir("outputs_csv");
  RandomStream stream(5, "outputs");
  TensorShape shape{2, 3, 4};
  ResponseTensor tensor(shape, stream.normal_vector(shape.total()));
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(4, 0.0, 1.5);

  write_outputs_csv(dir / "outputs.csv", tensor, grid);
  auto [tensor2, grid2] = read_outputs_csv(dir / "outputs.csv");
  CHECK((tensor.vec() - tensor2.vec()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((grid - grid2).cwiseAbs().maxCoeff() == 0.0);

  // drop a row -> not tensor-structured
  std::string content = read_file(dir / "outputs.csv");
  std::size_t last_line = content.rfind('\n', content.size() - 2);
  write_file_atomic(dir / "broken.csv", content.substr(0, last_line + 1));
  CHECK_THROWS_AS(read_outputs_csv(dir / "broken.csv"), ConfigError);
}

TEST_CASE("atomic writes require an existing directory") {
  fs::path missing = fs::temp_directory_path() / "fmtgp_does_not_exist" / "file.txt";
  fs::remove_all(missing.parent_path());
  CHECK_THROWS_AS(write_file_atomic(missing, "content"), ConfigError);
}

TEST_CASE("model JSON round-trips through save and load") {
  fs::path dir = temp_dir("model_json");
  RandomStream stream(7, "model");

  MultitaskDataset data;
  data.enc = oracles::random_encodings(stream, 6, 2, 3, 1.2);
  data.scalar_grid = Eigen::VectorXd::LinSpaced(8, 0.0, 1.5);
  Eigen::VectorXd ls(2);
  ls << 1.2, 2.0;
  Hyperparameters theta = Hyperparameters::from_natural(oracles::random_task_lower(stream, 2),
                                                        1.1, ls, 0.9, 0.02);
  KernelConfig kernel;
  auto draws = sample_prior(theta, data.enc, data.scalar_grid, kernel, 1, 11);
  data.responses = draws.front();

  FittedModel model;
  model.theta = theta;
  model.kernel = kernel;
  model.enc = data.enc;
  model.scalar_grid = data.scalar_grid;
  model.responses = data.responses;
  model.restart_index = 4;
  model.build_caches();
  save_model(dir / "model.json", model);

  FittedModel loaded = load_model(dir / "model.json");
  CHECK(loaded.nll == doctest::Approx(model.nll).epsilon(1e-12));
  CHECK(loaded.restart_index == 4);

  EncodedInputs test_enc = oracles::random_encodings(stream, 2, 2, 3, 1.2);
  test_enc.bases = model.enc.bases;
  Eigen::VectorXd u_star(3);
  u_star << 0.1, 0.7, 1.4;
  Posterior a = predict(model, test_enc, u_star);
  Posterior b = predict(loaded, test_enc, u_star);
  for (int s = 0; s < 2; ++s) {
    CHECK((a.mean[s] - b.mean[s]).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.variance[s] - b.variance[s]).cwiseAbs().maxCoeff() < 1e-12);
  }

  // version stamping
  json doc = json::parse(read_file(dir / "model.json"));
  doc["format_version"] = 999;
  write_file_atomic(dir / "future.json", doc.dump());
  CHECK_THROWS_AS(load_model(dir / "future.json"), ConfigError);
}

TEST_CASE("basis JSON round-trips") {
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(64, 0.0, 1.0);
  RandomStream stream(9, "basis-json");
  Eigen::MatrixXd channel(10, 64);
  for (int i = 0; i < 10; ++i)
    for (int k = 0; k < 64; ++k)
      channel(i, k) = std::sin(3.0 * grid[k] + i) + 0.1 * stream.normal();

  EncodingConfig encoding;
  encoding.kind = BasisKind::kBsplinePca;
  encoding.dim = 4;
  encoding.bspline_stage_dim = 10;
  EncodedInputs enc = fit_encodings({channel}, grid, encoding);

  json j = basis_to_json(enc.bases[0]);
  Basis loaded = basis_from_json(j);
  CHECK(loaded.kind == enc.bases[0].kind);
  Eigen::MatrixXd direct = encode_with(enc.bases[0], channel);
  Eigen::MatrixXd via_json = encode_with(loaded, channel);
  CHECK((direct - via_json).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dataset split takes the trailing replicates") {
  RayleighConfig generator;
  generator.replicates = 10;
  generator.scalar_points = 6;
  generator.seed = 3;
  SyntheticDataset data = generate_dataset(generator);
  SplitDataset split = split_dataset(data.raw, 3);
  CHECK(split.train.replicate_count() == 7);
  CHECK(split.test.replicate_count() == 3);
  CHECK((split.test.channels[0].row(0) - data.raw.channels[0].row(7)).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK(split.test.responses(1, 2, 5) == data.raw.responses(1, 9, 5));
  CHECK_THROWS_AS(split_dataset(data.raw, 10), ConfigError);
}

TEST_SUITE_END();
