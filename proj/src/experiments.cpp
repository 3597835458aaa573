#include "fmtgp/experiments.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "fmtgp/dataio.hpp"
#include "fmtgp/errors.hpp"

namespace fmtgp {

namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

RawDataset take_replicates(const RawDataset& raw, const std::vector<Eigen::Index>& keep) {
  RawDataset out;
  out.input_grid = raw.input_grid;
  out.scalar_grid = raw.scalar_grid;
  const TensorShape shape = raw.responses.shape();
  for (const Eigen::MatrixXd& channel : raw.channels) {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(keep.size()), channel.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) sub.row(k) = channel.row(keep[k]);
    out.channels.push_back(std::move(sub));
  }
  TensorShape sub_shape{shape.tasks, static_cast<Eigen::Index>(keep.size()), shape.grid};
  ResponseTensor responses(sub_shape);
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    for (std::size_t k = 0; k < keep.size(); ++k) {
      for (Eigen::Index j = 0; j < shape.grid; ++j) {
        responses(s, static_cast<Eigen::Index>(k), j) = raw.responses(s, keep[k], j);
      }
    }
  }
  out.responses = std::move(responses);
  return out;
}

// Truth matrix (n_test x n_u) for one task.
Eigen::MatrixXd truth_matrix(const RawDataset& raw, Eigen::Index task) {
  const TensorShape shape = raw.responses.shape();
  Eigen::MatrixXd truth(shape.replicates, shape.grid);
  for (Eigen::Index i = 0; i < shape.replicates; ++i) {
    for (Eigen::Index j = 0; j < shape.grid; ++j) truth(i, j) = raw.responses(task, i, j);
  }
  return truth;
}

TaskEvaluation make_evaluation(const RawDataset& test, const Posterior& post, Eigen::Index task) {
  TaskEvaluation eval;
  eval.truth = truth_matrix(test, task);
  eval.mean = post.mean[task];
  eval.variance = post.variance[task].cwiseMax(0.0);
  return eval;
}

// Single-task view of a raw dataset (S = 1).
RawDataset single_task_view(const RawDataset& raw, Eigen::Index task) {
  RawDataset out;
  out.channels = raw.channels;
  out.input_grid = raw.input_grid;
  out.scalar_grid = raw.scalar_grid;
  const TensorShape shape = raw.responses.shape();
  ResponseTensor responses({1, shape.replicates, shape.grid});
  for (Eigen::Index i = 0; i < shape.replicates; ++i) {
    for (Eigen::Index j = 0; j < shape.grid; ++j) {
      responses(0, i, j) = raw.responses(task, i, j);
    }
  }
  out.responses = std::move(responses);
  return out;
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
  std::ostringstream out;
  out << header << "\n";
  for (const std::string& row : rows) out << row << "\n";
  write_file_atomic(path, out.str());
}

void write_metrics_csv(const fs::path& path,
                       const std::vector<std::tuple<std::string, std::string, double>>& rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const auto& [task, metric, value] : rows) {
    lines.push_back(task + "," + metric + "," + format_double(value));
  }
  write_csv(path, "task,metric,value", lines);
}

void write_trace_csv(const fs::path& path, const std::vector<TraceRow>& trace) {
  std::vector<std::string> lines;
  lines.reserve(trace.size());
  for (const TraceRow& row : trace) {
    lines.push_back(std::to_string(row.restart) + "," + std::to_string(row.iteration) + "," +
                    format_double(row.nll) + "," + format_double(row.grad_norm));
  }
  write_csv(path, "restart,iteration,nll,grad_norm", lines);
}

void write_predictions_csv(const fs::path& path, const Posterior& post,
                           const Eigen::VectorXd& u_star) {
  std::vector<std::string> lines;
  for (std::size_t s = 0; s < post.mean.size(); ++s) {
    const Eigen::MatrixXd& mean = post.mean[s];
    const Eigen::MatrixXd& variance = post.variance[s];
    for (Eigen::Index t = 0; t < mean.rows(); ++t) {
      for (Eigen::Index j = 0; j < mean.cols(); ++j) {
        lines.push_back(std::to_string(s + 1) + "," + std::to_string(t + 1) + "," +
                        format_double(u_star[j]) + "," + format_double(mean(t, j)) + "," +
                        format_double(variance(t, j)));
      }
    }
  }
  write_csv(path, "task,replicate,u,mean,var", lines);
}

// Run indexed jobs on up to `jobs` threads; results land in caller-owned
// slots so the outcome is identical regardless of thread count.
void parallel_for(int count, int jobs, const std::function<void(int)>& work) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) work(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  int workers = std::min(jobs, count);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) work(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

RawDataset obtain_dataset(const ExperimentConfig& config) {
  if (config.use_generator) {
    RayleighConfig generator = config.generator;
    generator.seed = config.seed;
    return generate_dataset(generator).raw;
  }
  RawDataset raw;
  bool first = true;
  for (const std::string& path : config.dataset.channels) {
    auto [grid, samples] = read_channel_csv(path);
    if (first) {
      raw.input_grid = grid;
      first = false;
    } else if (grid.size() != raw.input_grid.size() ||
               (grid - raw.input_grid).cwiseAbs().maxCoeff() > 1e-9) {
      throw ConfigError("channel CSVs do not share a common grid");
    }
    raw.channels.push_back(std::move(samples));
  }
  auto [responses, scalar_grid] = read_outputs_csv(config.dataset.outputs);
  raw.responses = std::move(responses);
  raw.scalar_grid = std::move(scalar_grid);
  raw.validate();
  return raw;
}

SplitDataset split_dataset(const RawDataset& raw, int n_test) {
  const Eigen::Index n = raw.replicate_count();
  if (n_test < 0 || n_test >= n) {
    throw ConfigError("evaluation.n_test must be in [0, n_f)");
  }
  std::vector<Eigen::Index> train_idx, test_idx;
  for (Eigen::Index i = 0; i < n - n_test; ++i) train_idx.push_back(i);
  for (Eigen::Index i = n - n_test; i < n; ++i) test_idx.push_back(i);
  return {take_replicates(raw, train_idx), take_replicates(raw, test_idx)};
}

MultitaskDataset encode_dataset(const RawDataset& raw, const EncodingConfig& encoding) {
  raw.validate();
  MultitaskDataset data;
  data.enc = fit_encodings(raw.channels, raw.input_grid, encoding);
  data.scalar_grid = raw.scalar_grid;
  data.responses = raw.responses;
  data.validate();
  return data;
}

void prepare_run_directory(const ExperimentConfig& config, const fs::path& out_dir) {
  if (!fs::exists(out_dir)) {
    fs::path parent = out_dir.parent_path();
    if (!parent.empty() && !fs::exists(parent)) {
      throw ConfigError("output directory's parent does not exist: " + parent.string());
    }
    fs::create_directory(out_dir);
  }
  write_file_atomic(out_dir / "config.resolved", config_to_json(config).dump(2) + "\n");
}

void run_generate(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  RayleighConfig generator = config.generator;
  generator.seed = config.seed;
  SyntheticDataset data = generate_dataset(generator);
  for (std::size_t d = 0; d < data.raw.channels.size(); ++d) {
    write_channel_csv(out_dir / ("channel_" + std::to_string(d + 1) + ".csv"),
                      data.raw.input_grid, data.raw.channels[d]);
  }
  write_outputs_csv(out_dir / "outputs.csv", data.raw.responses, data.raw.scalar_grid);
  write_file_atomic(out_dir / "theta0.json",
                    theta0_to_json(data.theta0, data.kernel).dump(2) + "\n");
}

FitResult run_fit(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  RawDataset raw = obtain_dataset(config);
  SplitDataset split = split_dataset(raw, config.evaluation.n_test);
  MultitaskDataset train = encode_dataset(split.train, config.encoding);

  FitResult result;
  result.model = multi_start_fit(train, config.fit_config(), &result.trace, config.jobs);
  save_model(out_dir / "model.json", result.model);
  write_trace_csv(out_dir / "trace.csv", result.trace);

  std::vector<std::tuple<std::string, std::string, double>> metrics;
  metrics.emplace_back("all", "nll", result.model.nll);
  metrics.emplace_back("all", "best_restart", result.model.restart_index);
  if (config.evaluation.n_test > 0) {
    EncodedInputs test_enc =
        encode_test_inputs(result.model.enc, split.test.channels, split.test.input_grid);
    Posterior post = predict(result.model, test_enc, split.test.scalar_grid);
    const Eigen::Index tasks = result.model.responses.shape().tasks;
    for (Eigen::Index s = 0; s < tasks; ++s) {
      TaskEvaluation eval = make_evaluation(split.test, post, s);
      metrics.emplace_back(std::to_string(s + 1), "q2", q2(eval));
      metrics.emplace_back(std::to_string(s + 1), "ca",
                           coverage_accuracy(eval, config.evaluation.delta));
    }
  }
  write_metrics_csv(out_dir / "metrics.csv", metrics);
  return result;
}

void run_predict(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  if (config.model_path.empty()) {
    throw ConfigError("predict needs a model: set model_path or pass --model");
  }
  FittedModel model = load_model(config.model_path);
  RawDataset raw = obtain_dataset(config);
  SplitDataset split = split_dataset(raw, config.evaluation.n_test);
  const RawDataset& target = config.evaluation.n_test > 0 ? split.test : raw;
  EncodedInputs test_enc = encode_test_inputs(model.enc, target.channels, target.input_grid);
  Posterior post = predict(model, test_enc, target.scalar_grid);
  write_predictions_csv(out_dir / "predictions.csv", post, target.scalar_grid);
}

LooResult run_loo(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  RawDataset raw = obtain_dataset(config);
  const Eigen::Index n = raw.replicate_count();
  if (n < 3) throw ConfigError("LOO needs at least 3 replicates");
  const Eigen::Index tasks = raw.responses.shape().tasks;

  // When hyperparameters are reused across folds, fit them once on the full
  // dataset; bases are still refit on each fold's training replicates.
  std::optional<Hyperparameters> shared_theta;
  if (!config.evaluation.loo_reoptimize) {
    MultitaskDataset full = encode_dataset(raw, config.encoding);
    shared_theta = multi_start_fit(full, config.fit_config(), nullptr, config.jobs).theta;
  }

  LooResult result;
  result.folds.assign(n, LooFold{});

  parallel_for(static_cast<int>(n), config.jobs, [&](int fold) {
    LooFold& out = result.folds[fold];
    out.fold = fold;
    try {
      std::vector<Eigen::Index> train_idx;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (i != fold) train_idx.push_back(i);
      }
      RawDataset train_raw = take_replicates(raw, train_idx);
      RawDataset test_raw = take_replicates(raw, {static_cast<Eigen::Index>(fold)});
      MultitaskDataset train = encode_dataset(train_raw, config.encoding);

      FitConfig fit_config = config.fit_config();
      fit_config.seed = RandomStream::mix_seed(config.seed, "loo-fold", fold);
      FittedModel model;
      if (shared_theta) {
        model.theta = *shared_theta;
        model.kernel = fit_config.kernel;
        model.enc = train.enc;
        model.scalar_grid = train.scalar_grid;
        model.responses = train.responses;
        model.build_caches();
      } else {
        model = multi_start_fit(train, fit_config, nullptr, 1);
      }

      EncodedInputs test_enc =
          encode_test_inputs(model.enc, test_raw.channels, test_raw.input_grid);
      Posterior post = predict(model, test_enc, test_raw.scalar_grid);
      for (Eigen::Index s = 0; s < tasks; ++s) {
        TaskEvaluation eval = make_evaluation(test_raw, post, s);
        out.q2.push_back(q2(eval));
        out.ca.push_back(coverage_accuracy(eval, config.evaluation.delta));
      }
    } catch (const std::exception& err) {
      out.failed = true;
      out.error = err.what();
    }
  });

  std::vector<std::string> rows;
  std::vector<std::string> failure_rows;
  std::vector<std::vector<double>> q2_by_task(tasks), ca_by_task(tasks);
  for (const LooFold& fold : result.folds) {
    if (fold.failed) {
      ++result.failed_count;
      failure_rows.push_back(std::to_string(fold.fold + 1) + "," + fold.error);
      continue;
    }
    for (Eigen::Index s = 0; s < tasks; ++s) {
      rows.push_back(std::to_string(fold.fold + 1) + "," + std::to_string(s + 1) + "," +
                     format_double(fold.q2[s]) + "," + format_double(fold.ca[s]));
      q2_by_task[s].push_back(fold.q2[s]);
      ca_by_task[s].push_back(fold.ca[s]);
    }
  }
  write_csv(out_dir / "loo_metrics.csv", "fold,task,q2,ca", rows);
  if (!failure_rows.empty()) {
    write_csv(out_dir / "loo_failures.csv", "fold,error", failure_rows);
  }

  std::vector<std::string> summary_rows;
  for (Eigen::Index s = 0; s < tasks; ++s) {
    if (q2_by_task[s].empty()) continue;
    result.q2_stats.push_back(boxplot_stats(q2_by_task[s]));
    result.ca_stats.push_back(boxplot_stats(ca_by_task[s]));
    double equal_one = 0.0;
    for (double ca : ca_by_task[s]) {
      if (ca >= 1.0) equal_one += 1.0;
    }
    result.ca_equal_one_fraction.push_back(equal_one / ca_by_task[s].size());
    for (const char* metric : {"q2", "ca"}) {
      const BoxplotStats& stats =
          std::string(metric) == "q2" ? result.q2_stats.back() : result.ca_stats.back();
      summary_rows.push_back(std::to_string(s + 1) + "," + metric + "," +
                             format_double(stats.min) + "," + format_double(stats.q25) + "," +
                             format_double(stats.median) + "," + format_double(stats.q75) + "," +
                             format_double(stats.max));
    }
  }
  write_csv(out_dir / "loo_summary.csv", "task,metric,min,q25,median,q75,max", summary_rows);
  return result;
}

std::vector<CompareRow> run_compare(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  RawDataset raw = obtain_dataset(config);
  if (config.evaluation.n_test < 1) throw ConfigError("compare needs evaluation.n_test >= 1");
  SplitDataset split = split_dataset(raw, config.evaluation.n_test);
  const Eigen::Index tasks = raw.responses.shape().tasks;
  const Eigen::Index n_test = split.test.replicate_count();

  std::vector<CompareRow> rows;

  // Joint multitask model.
  MultitaskDataset train = encode_dataset(split.train, config.encoding);
  auto start = std::chrono::steady_clock::now();
  FittedModel mtgp = multi_start_fit(train, config.fit_config(), nullptr, config.jobs);
  double mtgp_train = seconds_since(start);

  EncodedInputs test_enc = encode_test_inputs(mtgp.enc, split.test.channels, split.test.input_grid);
  start = std::chrono::steady_clock::now();
  Posterior mtgp_post = predict(mtgp, test_enc, split.test.scalar_grid);
  double mtgp_predict = seconds_since(start) / static_cast<double>(n_test);

  for (Eigen::Index s = 0; s < tasks; ++s) {
    TaskEvaluation eval = make_evaluation(split.test, mtgp_post, s);
    rows.push_back({"mtgp", static_cast<int>(s + 1), q2(eval),
                    coverage_accuracy(eval, config.evaluation.delta), mtgp_train, mtgp_predict});
  }

  // Independent single-task models, identical settings and init draws.
  for (Eigen::Index s = 0; s < tasks; ++s) {
    RawDataset task_raw = single_task_view(split.train, s);
    RawDataset task_test = single_task_view(split.test, s);
    MultitaskDataset task_train = encode_dataset(task_raw, config.encoding);
    FitConfig fit_config = config.fit_config();
    fit_config.optimize_task_factor = false;  // theta = (sigma2, l_f, l_u)

    start = std::chrono::steady_clock::now();
    FittedModel gp = multi_start_fit(task_train, fit_config, nullptr, config.jobs);
    double gp_train = seconds_since(start);

    EncodedInputs gp_test_enc =
        encode_test_inputs(gp.enc, task_test.channels, task_test.input_grid);
    start = std::chrono::steady_clock::now();
    Posterior gp_post = predict(gp, gp_test_enc, task_test.scalar_grid);
    double gp_predict = seconds_since(start) / static_cast<double>(n_test);

    TaskEvaluation eval = make_evaluation(task_test, gp_post, 0);
    rows.push_back({"gp", static_cast<int>(s + 1), q2(eval),
                    coverage_accuracy(eval, config.evaluation.delta), gp_train, gp_predict});
  }

  std::vector<std::string> lines;
  for (const CompareRow& row : rows) {
    lines.push_back(row.model + "," + std::to_string(row.task) + "," + format_double(row.q2) +
                    "," + format_double(row.ca) + "," + format_double(row.train_seconds) + "," +
                    format_double(row.predict_seconds));
  }
  write_csv(out_dir / "compare.csv", "model,task,q2,ca,train_seconds,predict_seconds", lines);
  return rows;
}

std::vector<BenchmarkRow> run_benchmark(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  const BenchmarkConfig& bench = config.benchmark;

  std::vector<BenchmarkRow> rows;
  std::vector<std::string> lines;

  for (int n_f : bench.sizes) {
    const Eigen::Index n =
        static_cast<Eigen::Index>(bench.tasks) * n_f * bench.scalar_points;
    if (n > bench.max_n) {
      std::ostringstream msg;
      msg << "benchmark size n_f = " << n_f << " gives n = " << n
          << " beyond the naive-path guard " << bench.max_n;
      throw ConfigError(msg.str());
    }

    // Shared factors per size, built from generator-style kernel blocks.
    RayleighConfig generator;
    generator.replicates = n_f;
    generator.scalar_points = bench.scalar_points;
    generator.tasks = bench.tasks;
    generator.seed = RandomStream::mix_seed(config.seed, "benchmark-size", n_f);
    if (bench.tasks != 2) {
      generator.task_cov = Eigen::MatrixXd::Constant(bench.tasks, bench.tasks, 0.85);
      generator.task_cov.diagonal().setOnes();
    }
    SyntheticDataset data = generate_dataset(generator);
    CovBlocks blocks =
        build_blocks(data.theta0.task_factor(), data.theta0.sigma2(),
                     data.theta0.lengthscales_f(), data.theta0.lengthscale_u(), data.enc,
                     data.raw.scalar_grid, data.kernel);
    KroneckerCholesky kc = block_cholesky(blocks);
    ResponseTensor y = data.raw.responses;

    // The two arms must agree before any timing starts.
    Eigen::VectorXd tensorized = modewise_lower_solve(kc, y);
    Eigen::VectorXd naive = naive_lower_solve(kc.task, kc.functional, kc.scalar, y.vec(),
                                              bench.max_n);
    double err = (tensorized - naive).cwiseAbs().maxCoeff() /
                 std::max(1.0, naive.cwiseAbs().maxCoeff());
    if (err > 1e-9) {
      throw NumericalError("benchmark precheck failed: naive and tensorized alpha disagree");
    }

    auto time_method = [&](const std::function<void()>& body, double* mean, double* sd) {
      body();  // warm-up, discarded
      std::vector<double> samples(bench.reps);
      for (int r = 0; r < bench.reps; ++r) {
        auto start = std::chrono::steady_clock::now();
        body();
        samples[r] = seconds_since(start);
      }
      double total = 0.0;
      for (double s : samples) total += s;
      *mean = total / bench.reps;
      double var = 0.0;
      for (double s : samples) var += (s - *mean) * (s - *mean);
      *sd = bench.reps > 1 ? std::sqrt(var / (bench.reps - 1)) : 0.0;
    };

    BenchmarkRow naive_row{n_f, "naive", 0.0, 0.0, bench.reps};
    time_method(
        [&]() {
          volatile double sink =
              naive_lower_solve(kc.task, kc.functional, kc.scalar, y.vec(), bench.max_n)[0];
          (void)sink;
        },
        &naive_row.mean_seconds, &naive_row.std_seconds);

    BenchmarkRow tensor_row{n_f, "tensorized", 0.0, 0.0, bench.reps};
    time_method(
        [&]() {
          volatile double sink = modewise_lower_solve(kc, y)[0];
          (void)sink;
        },
        &tensor_row.mean_seconds, &tensor_row.std_seconds);

    for (const BenchmarkRow& row : {naive_row, tensor_row}) {
      rows.push_back(row);
      lines.push_back(std::to_string(row.n_f) + "," + row.method + "," +
                      format_double(row.mean_seconds) + "," + format_double(row.std_seconds) +
                      "," + std::to_string(row.reps));
    }
  }
  write_csv(out_dir / "benchmark.csv", "n_f,method,mean_seconds,std_seconds,reps", lines);
  return rows;
}

EnvelopeResult run_envelope(const ExperimentConfig& config, const fs::path& out_dir) {
  prepare_run_directory(config, out_dir);
  RawDataset raw = obtain_dataset(config);
  if (config.evaluation.n_test < 20) {
    throw ConfigError("envelope needs evaluation.n_test >= 20 for meaningful percentiles");
  }
  SplitDataset split = split_dataset(raw, config.evaluation.n_test);
  MultitaskDataset train = encode_dataset(split.train, config.encoding);
  FittedModel model = multi_start_fit(train, config.fit_config(), nullptr, config.jobs);

  EncodedInputs test_enc =
      encode_test_inputs(model.enc, split.test.channels, split.test.input_grid);
  Posterior post = predict(model, test_enc, split.test.scalar_grid);

  EnvelopeResult result;
  const Eigen::Index tasks = raw.responses.shape().tasks;
  std::vector<std::string> lines;
  std::vector<std::tuple<std::string, std::string, double>> metrics;
  for (Eigen::Index s = 0; s < tasks; ++s) {
    TaskEvaluation eval = make_evaluation(split.test, post, s);
    Envelopes env = calibration_envelopes(eval, config.evaluation.delta);

    Eigen::Index inside = 0;
    for (Eigen::Index i = 0; i < eval.truth.rows(); ++i) {
      for (Eigen::Index j = 0; j < eval.truth.cols(); ++j) {
        if (eval.truth(i, j) >= env.bound_lo[j] && eval.truth(i, j) <= env.bound_hi[j]) ++inside;
      }
    }
    result.civ_coverage.push_back(static_cast<double>(inside) /
                                  static_cast<double>(eval.truth.size()));
    metrics.emplace_back(std::to_string(s + 1), "civ_coverage", result.civ_coverage.back());

    for (Eigen::Index j = 0; j < split.test.scalar_grid.size(); ++j) {
      lines.push_back(std::to_string(s + 1) + "," + format_double(split.test.scalar_grid[j]) +
                      "," + format_double(env.true_lo[j]) + "," + format_double(env.true_hi[j]) +
                      "," + format_double(env.mean_lo[j]) + "," + format_double(env.mean_hi[j]) +
                      "," + format_double(env.bound_lo[j]) + "," + format_double(env.bound_hi[j]));
    }
    result.per_task.push_back(std::move(env));
  }
  write_csv(out_dir / "envelopes.csv",
            "task,u,ci_true_lo,ci_true_hi,ci_m_lo,ci_m_hi,ci_v_lo,ci_v_hi", lines);
  write_metrics_csv(out_dir / "metrics.csv", metrics);
  return result;
}

}  // namespace fmtgp
