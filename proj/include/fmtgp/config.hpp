#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fmtgp/mtgp.hpp"
#include "fmtgp/synthgen.hpp"

namespace fmtgp {

// Where the data comes from: either the Rayleigh generator or CSV files.
struct DatasetPaths {
  std::vector<std::string> channels;
  std::string outputs;
};

struct EvaluationConfig {
  double delta = 1.96;
  int n_test = 0;              // test split taken from the trailing replicates
  bool loo_reoptimize = true;  // refit hyperparameters per LOO fold
  std::vector<int> train_sizes;
};

struct BenchmarkConfig {
  std::vector<int> sizes{25, 100, 175, 250};  // n_f grid
  int tasks = 2;
  int scalar_points = 100;
  int reps = 50;
  Eigen::Index max_n = 60000;  // guard for the naive dense arm
};

struct OptimizerConfig {
  AdamSettings adam;
  InitRanges init;
  bool use_noise = false;
  std::optional<bool> optimize_task_factor;
  int n_restart = 10;
};

// The resolved experiment configuration. Loading validates the JSON schema
// (unknown keys anywhere are rejected) and fills defaults; `to_json` echoes
// the effective configuration, from which a run can be reproduced.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  int jobs = 1;
  bool use_generator = true;
  RayleighConfig generator;
  DatasetPaths dataset;
  EncodingConfig encoding;
  KernelConfig kernel;
  OptimizerConfig optimizer;
  EvaluationConfig evaluation;
  BenchmarkConfig benchmark;
  std::string model_path;  // for `predict`

  FitConfig fit_config() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace fmtgp
