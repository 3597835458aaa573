#include "fmtgp/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "fmtgp/errors.hpp"

namespace fmtgp {

void TaskEvaluation::validate() const {
  if (truth.rows() != mean.rows() || truth.cols() != mean.cols() ||
      truth.rows() != variance.rows() || truth.cols() != variance.cols()) {
    throw ShapeError("task evaluation: shapes disagree");
  }
  if ((variance.array() < 0.0).any()) {
    throw NumericalError("task evaluation: negative predictive variance");
  }
}

double q2(const TaskEvaluation& batch) {
  batch.validate();
  if (batch.truth.size() < 2) throw ShapeError("q2 needs at least 2 test values");
  double mean_truth = batch.truth.mean();
  double ss_tot = (batch.truth.array() - mean_truth).square().sum();
  if (ss_tot <= 0.0) {
    throw NumericalError("q2: degenerate test set (zero empirical variance)");
  }
  double ss_res = (batch.truth - batch.mean).array().square().sum();
  return 1.0 - ss_res / ss_tot;
}

double coverage_accuracy(const TaskEvaluation& batch, double delta) {
  batch.validate();
  if (batch.truth.size() == 0) throw ShapeError("coverage_accuracy: empty batch");
  Eigen::ArrayXXd half = delta * batch.variance.array().sqrt();
  Eigen::ArrayXXd residual = (batch.truth - batch.mean).array().abs();
  return (residual <= half).cast<double>().mean();
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("percentile of empty set");
  q = std::clamp(q, 0.0, 1.0);
  std::sort(values.begin(), values.end());
  double pos = q * static_cast<double>(values.size() - 1);
  auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= values.size()) return values.back();
  double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

Envelopes calibration_envelopes(const TaskEvaluation& batch, double delta) {
  batch.validate();
  const Eigen::Index n_test = batch.truth.rows();
  const Eigen::Index n_grid = batch.truth.cols();
  if (n_test < 20) {
    throw NumericalError("calibration envelopes need at least 20 test replicates");
  }

  Envelopes env;
  env.true_lo.resize(n_grid);
  env.true_hi.resize(n_grid);
  env.mean_lo.resize(n_grid);
  env.mean_hi.resize(n_grid);
  env.bound_lo.resize(n_grid);
  env.bound_hi.resize(n_grid);

  std::vector<double> column(n_test);
  auto col_percentile = [&](const Eigen::VectorXd& values, double q) {
    for (Eigen::Index i = 0; i < n_test; ++i) column[static_cast<std::size_t>(i)] = values[i];
    return percentile(column, q);
  };

  for (Eigen::Index j = 0; j < n_grid; ++j) {
    Eigen::VectorXd truth = batch.truth.col(j);
    Eigen::VectorXd mean = batch.mean.col(j);
    Eigen::VectorXd half = delta * batch.variance.col(j).array().sqrt().matrix();
    env.true_lo[j] = col_percentile(truth, 0.025);
    env.true_hi[j] = col_percentile(truth, 0.975);
    env.mean_lo[j] = col_percentile(mean, 0.025);
    env.mean_hi[j] = col_percentile(mean, 0.975);
    env.bound_lo[j] = col_percentile(mean - half, 0.025);
    env.bound_hi[j] = col_percentile(mean + half, 0.975);
  }
  return env;
}

BoxplotStats boxplot_stats(std::vector<double> values) {
  if (values.empty()) throw ShapeError("boxplot_stats of empty set");
  std::sort(values.begin(), values.end());
  BoxplotStats stats;
  stats.min = values.front();
  stats.max = values.back();
  stats.q25 = percentile(values, 0.25);
  stats.median = percentile(values, 0.50);
  stats.q75 = percentile(values, 0.75);
  return stats;
}

}  // namespace fmtgp
