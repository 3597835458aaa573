#pragma once

#include <vector>

#include <Eigen/Core>

namespace fmtgp {

// Evaluation data for one task: truth, predictive means and variances over
// (test replicate x scalar grid point).
struct TaskEvaluation {
  Eigen::MatrixXd truth;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd variance;

  void validate() const;
};

// Q^2 = 1 - SS_res / SS_tot with the empirical mean of the task's test
// values as baseline.
double q2(const TaskEvaluation& batch);

// Fraction of test points inside [m - delta sqrt(v), m + delta sqrt(v)].
double coverage_accuracy(const TaskEvaluation& batch, double delta);

// Empirical percentile with linear interpolation between order statistics
// (q in [0, 1]).
double percentile(std::vector<double> values, double q);

// The three 95% calibration envelopes per scalar grid point: the spread of
// the true responses, of the predictive means, and of the mean +/- delta
// sqrt(v) bounds across test replicates.
struct Envelopes {
  Eigen::VectorXd true_lo, true_hi;
  Eigen::VectorXd mean_lo, mean_hi;
  Eigen::VectorXd bound_lo, bound_hi;
};

Envelopes calibration_envelopes(const TaskEvaluation& batch, double delta);

// Aggregate helpers for the LOO summary (min, q25, median, q75, max).
struct BoxplotStats {
  double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};
BoxplotStats boxplot_stats(std::vector<double> values);

}  // namespace fmtgp
