#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fmtgp/dataio.hpp"
#include "fmtgp/errors.hpp"
#include "fmtgp/experiments.hpp"

namespace {

struct GlobalOptions {
  std::string config_path;
  std::string out_dir = "run";
  std::string model_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
};

fmtgp::ExperimentConfig resolve(const GlobalOptions& options) {
  fmtgp::ExperimentConfig config;
  if (!options.config_path.empty()) config = fmtgp::load_config(options.config_path);
  if (options.seed) {
    config.seed = *options.seed;
    config.generator.seed = *options.seed;
  }
  if (options.jobs) config.jobs = *options.jobs;
  if (!options.model_path.empty()) config.model_path = options.model_path;
  return config;
}

void add_global_flags(CLI::App* cmd, GlobalOptions& options) {
  cmd->add_option("--config", options.config_path, "experiment configuration (JSON)");
  cmd->add_option("--out", options.out_dir, "run output directory");
  cmd->add_option("--seed", options.seed, "root seed (overrides the config)");
  cmd->add_option("--jobs", options.jobs, "worker threads for folds/restarts");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitask Gaussian-process regression with functional covariates"};
  app.require_subcommand(1);

  GlobalOptions options;

  CLI::App* cmd_generate = app.add_subcommand("generate", "write a synthetic Rayleigh dataset");
  add_global_flags(cmd_generate, options);
  CLI::App* cmd_fit = app.add_subcommand("fit", "fit the model and persist it");
  add_global_flags(cmd_fit, options);
  CLI::App* cmd_predict = app.add_subcommand("predict", "posterior prediction from a saved model");
  add_global_flags(cmd_predict, options);
  cmd_predict->add_option("--model", options.model_path, "fitted model JSON");
  CLI::App* cmd_loo = app.add_subcommand("loo", "leave-one-replicate-out cross-validation");
  add_global_flags(cmd_loo, options);
  CLI::App* cmd_compare = app.add_subcommand("compare", "multitask vs single-task comparison");
  add_global_flags(cmd_compare, options);
  CLI::App* cmd_benchmark = app.add_subcommand("benchmark", "naive vs tensorized solve runtimes");
  add_global_flags(cmd_benchmark, options);
  CLI::App* cmd_envelope = app.add_subcommand("envelope", "calibration envelope analysis");
  add_global_flags(cmd_envelope, options);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    fmtgp::ExperimentConfig config = resolve(options);
    if (cmd_generate->parsed()) {
      fmtgp::run_generate(config, options.out_dir);
    } else if (cmd_fit->parsed()) {
      fmtgp::FitResult result = fmtgp::run_fit(config, options.out_dir);
      std::cout << "fit: nll=" << fmtgp::format_double(result.model.nll)
                << " restart=" << result.model.restart_index << "\n";
    } else if (cmd_predict->parsed()) {
      fmtgp::run_predict(config, options.out_dir);
    } else if (cmd_loo->parsed()) {
      fmtgp::LooResult result = fmtgp::run_loo(config, options.out_dir);
      std::cout << "loo: " << (result.folds.size() - result.failed_count) << "/"
                << result.folds.size() << " folds succeeded\n";
      if (10 * result.failed_count > static_cast<int>(result.folds.size())) {
        std::cerr << "loo: more than 10% of folds failed\n";
        return 1;
      }
    } else if (cmd_compare->parsed()) {
      fmtgp::run_compare(config, options.out_dir);
    } else if (cmd_benchmark->parsed()) {
      fmtgp::run_benchmark(config, options.out_dir);
    } else if (cmd_envelope->parsed()) {
      fmtgp::run_envelope(config, options.out_dir);
    }
  } catch (const fmtgp::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const fmtgp::NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
