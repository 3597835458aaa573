#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fmtgp/config.hpp"
#include "fmtgp/metrics.hpp"

namespace fmtgp {

// Loads the configured dataset: either freshly generated Rayleigh data or
// the channel/outputs CSVs named in the config.
RawDataset obtain_dataset(const ExperimentConfig& config);

struct SplitDataset {
  RawDataset train;
  RawDataset test;  // empty replicate set when n_test == 0
};

// Deterministic split: the trailing n_test replicates form the test set.
SplitDataset split_dataset(const RawDataset& raw, int n_test);

MultitaskDataset encode_dataset(const RawDataset& raw, const EncodingConfig& encoding);

// Creates the run directory (its parent must already exist) and echoes the
// effective configuration into <dir>/config.resolved.
void prepare_run_directory(const ExperimentConfig& config, const std::filesystem::path& out_dir);

void run_generate(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct FitResult {
  FittedModel model;
  std::vector<TraceRow> trace;
};
FitResult run_fit(const ExperimentConfig& config, const std::filesystem::path& out_dir);

void run_predict(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct LooFold {
  int fold = 0;  // 0-based
  bool failed = false;
  std::string error;
  std::vector<double> q2;  // per task
  std::vector<double> ca;
};

struct LooResult {
  std::vector<LooFold> folds;
  int failed_count = 0;
  // Per-task aggregates over successful folds.
  std::vector<BoxplotStats> q2_stats;
  std::vector<BoxplotStats> ca_stats;
  std::vector<double> ca_equal_one_fraction;
};
LooResult run_loo(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct CompareRow {
  std::string model;  // "mtgp" or "gp"
  int task = 0;       // 1-based
  double q2 = 0.0;
  double ca = 0.0;
  double train_seconds = 0.0;
  double predict_seconds = 0.0;  // per test scenario
};
std::vector<CompareRow> run_compare(const ExperimentConfig& config,
                                    const std::filesystem::path& out_dir);

struct BenchmarkRow {
  int n_f = 0;
  std::string method;  // "naive" or "tensorized"
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  int reps = 0;
};
std::vector<BenchmarkRow> run_benchmark(const ExperimentConfig& config,
                                        const std::filesystem::path& out_dir);

struct EnvelopeResult {
  std::vector<Envelopes> per_task;
  std::vector<double> civ_coverage;  // fraction of true responses inside CI_v
};
EnvelopeResult run_envelope(const ExperimentConfig& config, const std::filesystem::path& out_dir);

}  // namespace fmtgp
