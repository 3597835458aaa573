#include "fmtgp/mtgp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

#include <Eigen/Dense>

#include "fmtgp/errors.hpp"

namespace fmtgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

Eigen::MatrixXd cholesky_inverse(const Eigen::MatrixXd& lower) {
  Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(lower.rows(), lower.cols());
  lower.triangularView<Eigen::Lower>().solveInPlace(inv);
  return inv.transpose() * inv;  // (L L')^{-1}
}

Eigen::MatrixXd with_jitter(const Eigen::MatrixXd& block, double jitter) {
  if (jitter == 0.0) return block;
  Eigen::MatrixXd out = block;
  out.diagonal().array() += jitter;
  return out;
}

}  // namespace

TaskFactor Hyperparameters::task_factor() const {
  TaskFactor factor;
  factor.lower = task_raw.triangularView<Eigen::Lower>();
  for (Eigen::Index i = 0; i < task_raw.rows(); ++i) {
    factor.lower(i, i) = std::exp(task_raw(i, i));
  }
  return factor;
}

double Hyperparameters::sigma2() const { return std::exp(log_sigma2); }

Eigen::VectorXd Hyperparameters::lengthscales_f() const {
  return log_lengthscales_f.array().exp();
}

double Hyperparameters::lengthscale_u() const { return std::exp(log_lengthscale_u); }

double Hyperparameters::sigma2_noise() const {
  return log_sigma2_noise ? std::exp(*log_sigma2_noise) : 0.0;
}

void Hyperparameters::validate() const {
  if (task_raw.rows() != task_raw.cols() || task_raw.rows() < 1) {
    throw ShapeError("hyperparameters: task factor must be square");
  }
  auto finite_positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!finite_positive(sigma2())) throw NumericalError("hyperparameters: sigma2 not positive/finite");
  if (!finite_positive(lengthscale_u())) {
    throw NumericalError("hyperparameters: lengthscale_u not positive/finite");
  }
  for (Eigen::Index d = 0; d < channel_count(); ++d) {
    if (!finite_positive(std::exp(log_lengthscales_f[d]))) {
      throw NumericalError("hyperparameters: functional lengthscale not positive/finite");
    }
  }
  if (log_sigma2_noise && !finite_positive(sigma2_noise())) {
    throw NumericalError("hyperparameters: noise variance not positive/finite");
  }
  task_factor().validate();
}

Hyperparameters Hyperparameters::from_natural(const Eigen::MatrixXd& task_lower, double sigma2,
                                              const Eigen::VectorXd& lengthscales_f,
                                              double lengthscale_u,
                                              std::optional<double> sigma2_noise) {
  Hyperparameters theta;
  theta.task_raw = task_lower.triangularView<Eigen::Lower>();
  for (Eigen::Index i = 0; i < task_lower.rows(); ++i) {
    if (!(task_lower(i, i) > 0.0)) {
      throw NumericalError("from_natural: task factor diagonal must be positive");
    }
    theta.task_raw(i, i) = std::log(task_lower(i, i));
  }
  theta.log_sigma2 = std::log(sigma2);
  theta.log_lengthscales_f = lengthscales_f.array().log();
  theta.log_lengthscale_u = std::log(lengthscale_u);
  if (sigma2_noise) theta.log_sigma2_noise = std::log(*sigma2_noise);
  theta.validate();
  return theta;
}

Eigen::Index ParameterPacking::size() const {
  Eigen::Index task_entries = optimize_task_factor ? tasks * (tasks + 1) / 2 : 0;
  return task_entries + 1 + channels + 1 + (has_noise ? 1 : 0);
}

Eigen::VectorXd ParameterPacking::pack(const Hyperparameters& theta) const {
  Eigen::VectorXd packed(size());
  Eigen::Index k = 0;
  if (optimize_task_factor) {
    for (Eigen::Index a = 0; a < tasks; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) packed[k++] = theta.task_raw(a, b);
    }
  }
  packed[k++] = theta.log_sigma2;
  packed.segment(k, channels) = theta.log_lengthscales_f;
  k += channels;
  packed[k++] = theta.log_lengthscale_u;
  if (has_noise) packed[k++] = *theta.log_sigma2_noise;
  return packed;
}

void ParameterPacking::unpack(const Eigen::VectorXd& packed, Hyperparameters& theta) const {
  if (packed.size() != size()) throw ShapeError("parameter unpack: length mismatch");
  Eigen::Index k = 0;
  if (optimize_task_factor) {
    for (Eigen::Index a = 0; a < tasks; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) theta.task_raw(a, b) = packed[k++];
    }
  }
  theta.log_sigma2 = packed[k++];
  theta.log_lengthscales_f = packed.segment(k, channels);
  k += channels;
  theta.log_lengthscale_u = packed[k++];
  if (has_noise) theta.log_sigma2_noise = packed[k++];
}

std::vector<std::string> ParameterPacking::names() const {
  std::vector<std::string> out;
  if (optimize_task_factor) {
    for (Eigen::Index a = 0; a < tasks; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) {
        std::ostringstream name;
        name << "task_raw[" << a << "," << b << "]";
        out.push_back(name.str());
      }
    }
  }
  out.emplace_back("log_sigma2");
  for (Eigen::Index d = 0; d < channels; ++d) {
    out.push_back("log_lengthscale_f[" + std::to_string(d) + "]");
  }
  out.emplace_back("log_lengthscale_u");
  if (has_noise) out.emplace_back("log_sigma2_noise");
  return out;
}

ParameterPacking ParameterPacking::for_model(const Hyperparameters& theta,
                                             bool optimize_task_factor) {
  return {theta.task_count(), theta.channel_count(), optimize_task_factor, theta.has_noise()};
}

void MultitaskDataset::validate() const {
  enc.validate();
  responses.validate_finite();
  const TensorShape shape = responses.shape();
  if (shape.replicates != enc.replicate_count()) {
    throw ShapeError("dataset: tensor replicate count does not match encodings");
  }
  if (shape.grid != scalar_grid.size()) {
    throw ShapeError("dataset: tensor grid size does not match scalar grid");
  }
  if (shape.tasks < 1) throw ShapeError("dataset: needs at least one task");
}

PreparedDataset PreparedDataset::make(MultitaskDataset data, const KernelConfig& kernel) {
  data.validate();
  PreparedDataset prepared;
  prepared.channel_dist_sq = self_distance_matrices(data.enc);
  prepared.data = std::move(data);
  prepared.kernel = kernel;
  return prepared;
}

namespace {

CovBlocks build_blocks_cached(const Hyperparameters& theta, const PreparedDataset& prepared) {
  CovBlocks blocks;
  blocks.task = theta.task_factor().covariance();
  blocks.task = (0.5 * (blocks.task + blocks.task.transpose())).eval();
  blocks.functional = functional_cov(prepared.channel_dist_sq, theta.lengthscales_f(),
                                     theta.sigma2(), prepared.kernel.functional_nu);
  blocks.functional = (0.5 * (blocks.functional + blocks.functional.transpose())).eval();
  blocks.scalar = scalar_cov(prepared.data.scalar_grid, prepared.data.scalar_grid,
                             theta.lengthscale_u(), prepared.kernel.scalar);
  blocks.scalar = (0.5 * (blocks.scalar + blocks.scalar.transpose())).eval();
  return blocks;
}

}  // namespace

NllComputation nll_compute(const Hyperparameters& theta, const PreparedDataset& prepared) {
  theta.validate();
  if (theta.task_count() != prepared.data.responses.shape().tasks) {
    throw ShapeError("nll: task count mismatch");
  }
  if (theta.channel_count() != prepared.data.enc.channel_count()) {
    throw ShapeError("nll: channel count mismatch");
  }

  NllComputation comp;
  comp.blocks = build_blocks_cached(theta, prepared);
  const double n = static_cast<double>(prepared.total());

  if (!theta.has_noise()) {
    comp.chol = block_cholesky(comp.blocks);
    comp.alpha = modewise_lower_solve(*comp.chol, prepared.data.responses);
    comp.quad = comp.alpha.squaredNorm();
    comp.value = comp.chol->log_det_l + 0.5 * comp.quad + 0.5 * n * kLog2Pi;
  } else {
    const double noise = theta.sigma2_noise();
    comp.eigen = block_eigen(comp.blocks);
    comp.weights = kron_eigen_apply_inverse(*comp.eigen, noise, prepared.data.responses.vec());
    comp.quad = prepared.data.responses.vec().dot(comp.weights);
    comp.value =
        0.5 * kron_eigen_logdet(*comp.eigen, noise) + 0.5 * comp.quad + 0.5 * n * kLog2Pi;
  }
  return comp;
}

double nll(const Hyperparameters& theta, const PreparedDataset& prepared) {
  return nll_compute(theta, prepared).value;
}

namespace {

// d K_f / d log l_d: sigma2 * psi'(r)/r * (-D_d / l_d^2), elementwise.
Eigen::MatrixXd functional_block_derivative(const Eigen::MatrixXd& dist_d, double lengthscale_d,
                                            const Eigen::MatrixXd& r, double sigma2, MaternNu nu) {
  Eigen::MatrixXd out(r.rows(), r.cols());
  const double inv_l2 = 1.0 / (lengthscale_d * lengthscale_d);
  for (Eigen::Index j = 0; j < r.cols(); ++j) {
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      double rad = r(i, j);
      double d = dist_d(i, j) * inv_l2;
      out(i, j) = (rad > 0.0 && d > 0.0)
                      ? -sigma2 * matern_derivative_over_r(nu, rad) * d
                      : 0.0;
    }
  }
  return out;
}

// d K_u / d log l_u: -t psi'(t) at t = |du| / l_u (the periodic part carries
// no free parameters).
Eigen::MatrixXd scalar_block_derivative(const Eigen::VectorXd& grid, double lengthscale,
                                        MaternNu nu) {
  Eigen::MatrixXd out(grid.size(), grid.size());
  for (Eigen::Index j = 0; j < grid.size(); ++j) {
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
      double t = std::abs(grid[i] - grid[j]) / lengthscale;
      out(i, j) = -matern_derivative_over_r(nu, t) * t * t;
    }
  }
  return out;
}

struct QuadContractions {
  Eigen::MatrixXd task;        // H_S
  Eigen::MatrixXd functional;  // H_f
  Eigen::MatrixXd scalar;      // H_u
};

// H_d matrices such that w' (A_S (x) A_f (x) A_u) w = <A_d, H_d> when the
// other two factors equal the given blocks.
QuadContractions quad_contractions(const Eigen::VectorXd& w, const TensorShape& shape,
                                   const Eigen::MatrixXd& k_task, const Eigen::MatrixXd& k_func,
                                   const Eigen::MatrixXd& k_scalar) {
  using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
  Eigen::VectorXd t_func = mode_apply_task(k_task, mode_apply_grid(k_scalar, w, shape), shape);
  Eigen::VectorXd t_scalar = mode_apply_task(k_task, mode_apply_replicate(k_func, w, shape), shape);
  Eigen::VectorXd t_task = mode_apply_replicate(k_func, mode_apply_grid(k_scalar, w, shape), shape);

  QuadContractions h;
  h.functional = Eigen::MatrixXd::Zero(shape.replicates, shape.replicates);
  h.scalar = Eigen::MatrixXd::Zero(shape.grid, shape.grid);
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    ConstMap w_s(w.data() + s * shape.replicates * shape.grid, shape.grid, shape.replicates);
    ConstMap tf_s(t_func.data() + s * shape.replicates * shape.grid, shape.grid, shape.replicates);
    ConstMap tu_s(t_scalar.data() + s * shape.replicates * shape.grid, shape.grid,
                  shape.replicates);
    h.functional.noalias() += w_s.transpose() * tf_s;
    h.scalar.noalias() += w_s * tu_s.transpose();
  }
  ConstMap w_m(w.data(), shape.replicates * shape.grid, shape.tasks);
  ConstMap tt_m(t_task.data(), shape.replicates * shape.grid, shape.tasks);
  h.task = w_m.transpose() * tt_m;
  return h;
}

}  // namespace

Eigen::VectorXd nll_grad(const Hyperparameters& theta, const PreparedDataset& prepared,
                         const ParameterPacking& packing, double* value_out) {
  NllComputation comp = nll_compute(theta, prepared);
  if (value_out) *value_out = comp.value;

  const TensorShape shape = prepared.data.responses.shape();
  const double s_n = static_cast<double>(shape.tasks);
  const double f_n = static_cast<double>(shape.replicates);
  const double u_n = static_cast<double>(shape.grid);

  // Distance matrix of the functional block (for its derivatives).
  Eigen::MatrixXd r2 = Eigen::MatrixXd::Zero(shape.replicates, shape.replicates);
  const Eigen::VectorXd ls_f = theta.lengthscales_f();
  for (Eigen::Index d = 0; d < theta.channel_count(); ++d) {
    r2 += prepared.channel_dist_sq[d] / (ls_f[d] * ls_f[d]);
  }
  Eigen::MatrixXd r = r2.cwiseMax(0.0).cwiseSqrt();

  const Eigen::MatrixXd l_task = theta.task_factor().lower;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(packing.size());
  Eigen::Index k = 0;

  if (!theta.has_noise()) {
    const KroneckerCholesky& kc = *comp.chol;
    Eigen::VectorXd w = modewise_upper_solve(kc, comp.alpha);  // K^{-1} y

    // The optimized objective is the jittered covariance's likelihood, so
    // contractions use the effective blocks while derivative matrices stay
    // jitter-free.
    Eigen::MatrixXd k_task_eff = with_jitter(comp.blocks.task, kc.jitter[0]);
    Eigen::MatrixXd k_func_eff = with_jitter(comp.blocks.functional, kc.jitter[1]);
    Eigen::MatrixXd k_scalar_eff = with_jitter(comp.blocks.scalar, kc.jitter[2]);
    QuadContractions h = quad_contractions(w, shape, k_task_eff, k_func_eff, k_scalar_eff);

    Eigen::MatrixXd inv_task = cholesky_inverse(kc.task);
    Eigen::MatrixXd inv_func = cholesky_inverse(kc.functional);
    Eigen::MatrixXd inv_scalar = cholesky_inverse(kc.scalar);

    if (packing.optimize_task_factor) {
      Eigen::MatrixXd trace_mat = 2.0 * inv_task * l_task;            // <K^{-1}, dK_S>
      Eigen::MatrixXd quad_mat = (h.task + h.task.transpose()) * l_task;
      for (Eigen::Index a = 0; a < shape.tasks; ++a) {
        for (Eigen::Index b = 0; b <= a; ++b) {
          double chain = (a == b) ? l_task(a, a) : 1.0;
          grad[k++] = 0.5 * chain * (f_n * u_n * trace_mat(a, b) - quad_mat(a, b));
        }
      }
    }

    // log sigma2: dK_f = K_f (the unjittered block).
    grad[k++] = 0.5 * (s_n * u_n * inv_func.cwiseProduct(comp.blocks.functional).sum() -
                       h.functional.cwiseProduct(comp.blocks.functional).sum());

    for (Eigen::Index d = 0; d < theta.channel_count(); ++d) {
      Eigen::MatrixXd dk = functional_block_derivative(prepared.channel_dist_sq[d], ls_f[d], r,
                                                       theta.sigma2(),
                                                       prepared.kernel.functional_nu);
      grad[k++] = 0.5 * (s_n * u_n * inv_func.cwiseProduct(dk).sum() -
                         h.functional.cwiseProduct(dk).sum());
    }

    {
      Eigen::MatrixXd dk = scalar_block_derivative(prepared.data.scalar_grid,
                                                   theta.lengthscale_u(),
                                                   prepared.kernel.scalar.nu);
      grad[k++] = 0.5 * (s_n * f_n * inv_scalar.cwiseProduct(dk).sum() -
                         h.scalar.cwiseProduct(dk).sum());
    }
    return grad;
  }

  // Noise path: K~ = K + s2_noise I, handled through per-block eigenpairs.
  const KroneckerEigen& eig = *comp.eigen;
  const double noise = theta.sigma2_noise();
  const Eigen::VectorXd& w = comp.weights;
  QuadContractions h =
      quad_contractions(w, shape, comp.blocks.task, comp.blocks.functional, comp.blocks.scalar);

  // tr(K~^{-1} (A_S (x) A_f (x) A_u)) = sum g_S g_f g_u / (l_S l_f l_u + s2)
  // with g_d the diagonal of Q_d' A_d Q_d (equal to l_d when A_d = K_d).
  auto trace_sum = [&](const Eigen::VectorXd& g_task, const Eigen::VectorXd& g_func,
                       const Eigen::VectorXd& g_scalar) {
    double total = 0.0;
    for (Eigen::Index s = 0; s < shape.tasks; ++s) {
      for (Eigen::Index i = 0; i < shape.replicates; ++i) {
        double sf_val = eig.task_values[s] * eig.functional_values[i];
        double sf_g = g_task[s] * g_func[i];
        for (Eigen::Index j = 0; j < shape.grid; ++j) {
          total += sf_g * g_scalar[j] / (sf_val * eig.scalar_values[j] + noise);
        }
      }
    }
    return total;
  };
  auto transformed_diag = [](const Eigen::MatrixXd& q, const Eigen::MatrixXd& a) {
    Eigen::MatrixXd aq = a * q;
    return (q.cwiseProduct(aq)).colwise().sum().transpose().eval();
  };

  if (packing.optimize_task_factor) {
    Eigen::MatrixXd quad_mat = (h.task + h.task.transpose()) * l_task;
    Eigen::MatrixXd ltq = l_task.transpose() * eig.task_vectors;  // rows: b, cols: eigenindex
    for (Eigen::Index a = 0; a < shape.tasks; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) {
        double chain = (a == b) ? l_task(a, a) : 1.0;
        // diag(Q' (E_ab L' + L E_ab') Q) = 2 Q(a,:) o (L'Q)(b,:)
        Eigen::VectorXd g_task =
            2.0 * eig.task_vectors.row(a).cwiseProduct(ltq.row(b)).transpose();
        double trace = trace_sum(g_task, eig.functional_values, eig.scalar_values);
        grad[k++] = 0.5 * chain * (trace - quad_mat(a, b));
      }
    }
  }

  grad[k++] = 0.5 * (trace_sum(eig.task_values,
                               transformed_diag(eig.functional_vectors, comp.blocks.functional),
                               eig.scalar_values) -
                     h.functional.cwiseProduct(comp.blocks.functional).sum());

  for (Eigen::Index d = 0; d < theta.channel_count(); ++d) {
    Eigen::MatrixXd dk = functional_block_derivative(prepared.channel_dist_sq[d], ls_f[d], r,
                                                     theta.sigma2(), prepared.kernel.functional_nu);
    grad[k++] = 0.5 * (trace_sum(eig.task_values, transformed_diag(eig.functional_vectors, dk),
                                 eig.scalar_values) -
                       h.functional.cwiseProduct(dk).sum());
  }

  {
    Eigen::MatrixXd dk = scalar_block_derivative(prepared.data.scalar_grid, theta.lengthscale_u(),
                                                 prepared.kernel.scalar.nu);
    grad[k++] = 0.5 * (trace_sum(eig.task_values, eig.functional_values,
                                 transformed_diag(eig.scalar_vectors, dk)) -
                       h.scalar.cwiseProduct(dk).sum());
  }

  {
    // d K~ / d log s2_noise = s2_noise I.
    Eigen::VectorXd ones_task = Eigen::VectorXd::Ones(shape.tasks);
    Eigen::VectorXd ones_func = Eigen::VectorXd::Ones(shape.replicates);
    Eigen::VectorXd ones_scalar = Eigen::VectorXd::Ones(shape.grid);
    double trace = trace_sum(ones_task, ones_func, ones_scalar);
    grad[k++] = 0.5 * noise * (trace - w.squaredNorm());
  }
  return grad;
}

Hyperparameters draw_initialization(RandomStream& stream, Eigen::Index tasks,
                                    Eigen::Index channels, const FitConfig& config) {
  Hyperparameters theta;
  theta.log_lengthscales_f.resize(channels);
  for (Eigen::Index d = 0; d < channels; ++d) {
    theta.log_lengthscales_f[d] =
        std::log(stream.uniform(config.init.lengthscale_f.first, config.init.lengthscale_f.second));
  }
  theta.log_lengthscale_u =
      std::log(stream.uniform(config.init.lengthscale_u.first, config.init.lengthscale_u.second));
  theta.log_sigma2 = std::log(stream.uniform(config.init.sigma2.first, config.init.sigma2.second));
  if (config.use_noise) {
    theta.log_sigma2_noise =
        std::log(stream.uniform(config.init.sigma2_noise.first, config.init.sigma2_noise.second));
  }
  theta.task_raw = Eigen::MatrixXd::Zero(tasks, tasks);
  if (config.effective_optimize_task_factor(tasks)) {
    for (Eigen::Index a = 0; a < tasks; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) {
        theta.task_raw(a, b) =
            (a == b) ? stream.uniform(config.init.task_log_diag.first,
                                      config.init.task_log_diag.second)
                     : stream.uniform(config.init.task_offdiag.first,
                                      config.init.task_offdiag.second);
      }
    }
  }
  return theta;
}

void FittedModel::build_caches() {
  PreparedDataset prepared =
      PreparedDataset::make(MultitaskDataset{enc, scalar_grid, responses}, kernel);
  NllComputation comp = nll_compute(theta, prepared);
  blocks = std::move(comp.blocks);
  chol = std::move(comp.chol);
  alpha = std::move(comp.alpha);
  eigen = std::move(comp.eigen);
  weights = std::move(comp.weights);
  nll = comp.value;
}

FittedModel fit(const MultitaskDataset& dataset, const FitConfig& config,
                const Hyperparameters& init, std::vector<TraceRow>* trace, int restart_index) {
  PreparedDataset prepared = PreparedDataset::make(dataset, config.kernel);
  const TensorShape shape = prepared.data.responses.shape();
  ParameterPacking packing =
      ParameterPacking::for_model(init, config.effective_optimize_task_factor(shape.tasks));

  Hyperparameters theta = init;
  Eigen::VectorXd params = packing.pack(theta);
  Eigen::VectorXd m = Eigen::VectorXd::Zero(params.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(params.size());
  const AdamSettings& adam = config.adam;
  // The optimizer works on the per-observation objective (NLL / n), the
  // scale on which the learning rate, gradient clipping and early-stopping
  // tolerance are quoted.
  const double scale = 1.0 / static_cast<double>(shape.total());

  Eigen::VectorXd best_params = params;
  double best_value = std::numeric_limits<double>::infinity();
  double previous_value = std::numeric_limits<double>::quiet_NaN();
  int stall = 0;
  bool have_evaluation = false;

  for (int iter = 1; iter <= adam.max_iter; ++iter) {
    double value = 0.0;
    Eigen::VectorXd grad;
    try {
      grad = nll_grad(theta, prepared, packing, &value);
    } catch (const NumericalError& err) {
      if (!have_evaluation) {
        std::ostringstream msg;
        msg << "fit: objective failed at initialization (" << err.what() << ")";
        throw NumericalError(msg.str());
      }
      break;  // keep the best iterate seen so far
    }
    if (!std::isfinite(value)) {
      if (!have_evaluation) {
        std::ostringstream msg;
        msg << "fit: non-finite objective at initialization; parameters:";
        const auto names = packing.names();
        for (Eigen::Index i = 0; i < params.size(); ++i) {
          msg << ' ' << names[i] << '=' << params[i];
        }
        throw NumericalError(msg.str());
      }
      break;
    }
    have_evaluation = true;

    grad *= scale;
    double grad_norm = grad.norm();
    if (trace) trace->push_back({restart_index, iter, value, grad_norm});
    if (value < best_value) {
      best_value = value;
      best_params = params;
    }
    if (iter > 1) {
      stall = ((previous_value - value) * scale < adam.early_stop_tol) ? stall + 1 : 0;
      if (stall >= adam.early_stop_patience) break;
    }
    previous_value = value;

    if (adam.clip_norm > 0.0 && grad_norm > adam.clip_norm) {
      grad *= adam.clip_norm / grad_norm;
    }
    if (adam.weight_decay != 0.0) grad += adam.weight_decay * params;
    m = adam.beta1 * m + (1.0 - adam.beta1) * grad;
    v = adam.beta2 * v + (1.0 - adam.beta2) * grad.cwiseProduct(grad);
    double bc1 = 1.0 - std::pow(adam.beta1, iter);
    double bc2 = 1.0 - std::pow(adam.beta2, iter);
    params -= (adam.learning_rate / bc1) *
              m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + adam.epsilon).matrix());
    packing.unpack(params, theta);
  }

  if (!have_evaluation) throw NumericalError("fit: no successful objective evaluation");

  // The loop updates after evaluating, so the final iterate is unscored.
  try {
    packing.unpack(params, theta);
    double final_value = nll(theta, prepared);
    if (std::isfinite(final_value) && final_value < best_value) {
      best_value = final_value;
      best_params = params;
    }
  } catch (const NumericalError&) {
    // final iterate unusable; best recorded iterate stands
  }

  packing.unpack(best_params, theta);
  FittedModel model;
  model.theta = theta;
  model.kernel = config.kernel;
  model.enc = dataset.enc;
  model.scalar_grid = dataset.scalar_grid;
  model.responses = dataset.responses;
  model.restart_index = restart_index;
  model.build_caches();
  return model;
}

FittedModel multi_start_fit(const MultitaskDataset& dataset, const FitConfig& config,
                            std::vector<TraceRow>* trace, int jobs) {
  if (config.n_restart < 1) throw ConfigError("multi_start_fit: n_restart must be >= 1");
  dataset.validate();
  const Eigen::Index tasks = dataset.responses.shape().tasks;
  const Eigen::Index channels = dataset.enc.channel_count();

  struct RestartOutcome {
    std::optional<FittedModel> model;
    std::string error;
    std::vector<TraceRow> trace;
  };
  std::vector<RestartOutcome> outcomes(config.n_restart);

  auto run_one = [&](int r) {
    RandomStream stream(config.seed, "init", static_cast<std::uint64_t>(r));
    Hyperparameters init = draw_initialization(stream, tasks, channels, config);
    try {
      outcomes[r].model = fit(dataset, config, init, &outcomes[r].trace, r);
    } catch (const std::exception& err) {
      outcomes[r].error = err.what();
    }
  };

  if (jobs <= 1 || config.n_restart == 1) {
    for (int r = 0; r < config.n_restart; ++r) run_one(r);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    int workers = std::min(jobs, config.n_restart);
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&]() {
        for (int r = next.fetch_add(1); r < config.n_restart; r = next.fetch_add(1)) run_one(r);
      });
    }
    for (auto& th : pool) th.join();
  }

  int best = -1;
  for (int r = 0; r < config.n_restart; ++r) {
    if (trace) {
      trace->insert(trace->end(), outcomes[r].trace.begin(), outcomes[r].trace.end());
    }
    if (outcomes[r].model &&
        (best < 0 || outcomes[r].model->nll < outcomes[best].model->nll)) {
      best = r;
    }
  }
  if (best < 0) {
    std::ostringstream msg;
    msg << "multi_start_fit: all " << config.n_restart << " restarts failed:";
    for (int r = 0; r < config.n_restart; ++r) {
      msg << "\n  restart " << r << ": " << outcomes[r].error;
    }
    throw NumericalError(msg.str());
  }
  return std::move(*outcomes[best].model);
}

Posterior predict(const FittedModel& model, const EncodedInputs& test_enc,
                  const Eigen::VectorXd& u_star) {
  const TensorShape shape = model.responses.shape();
  if (test_enc.channel_count() != model.enc.channel_count()) {
    throw ShapeError("predict: test inputs have a different channel count");
  }
  for (int d = 0; d < test_enc.channel_count(); ++d) {
    if (test_enc.coefficients[d].cols() != model.enc.bases[d].coeff_dim()) {
      throw ShapeError("predict: test encodings do not match the model's frozen basis");
    }
  }
  const Eigen::Index n_test = test_enc.replicate_count();
  const Eigen::Index n_star = u_star.size();
  const double sigma2 = model.theta.sigma2();
  const double noise = model.theta.sigma2_noise();
  const double u_diag = scalar_cov_diag(model.kernel.scalar);

  // Cross-covariance factors.
  Eigen::MatrixXd k_func_star =
      functional_cov(cross_distance_matrices(test_enc, model.enc),
                     model.theta.lengthscales_f(), sigma2, model.kernel.functional_nu);
  Eigen::MatrixXd k_scalar_star =
      scalar_cov(u_star, model.scalar_grid, model.theta.lengthscale_u(), model.kernel.scalar);
  Eigen::MatrixXd k_task = model.blocks.task;  // column s = cross-covariances of task s

  Posterior post;
  post.mean.assign(shape.tasks, Eigen::MatrixXd(n_test, n_star));
  post.variance.assign(shape.tasks, Eigen::MatrixXd(n_test, n_star));

  if (model.chol) {
    const KroneckerCholesky& kc = *model.chol;
    // zeta systems, batched: one triangular solve per mode.
    Eigen::MatrixXd z_task = k_task;
    kc.task.triangularView<Eigen::Lower>().solveInPlace(z_task);
    Eigen::MatrixXd z_func = k_func_star.transpose();
    kc.functional.triangularView<Eigen::Lower>().solveInPlace(z_func);
    Eigen::MatrixXd z_scalar = k_scalar_star.transpose();
    kc.scalar.triangularView<Eigen::Lower>().solveInPlace(z_scalar);

    Eigen::VectorXd means = kron_matvec(z_task.transpose(), z_func.transpose(),
                                        z_scalar.transpose(), model.alpha);
    Eigen::VectorXd q_task = z_task.colwise().squaredNorm();
    Eigen::VectorXd q_func = z_func.colwise().squaredNorm();
    Eigen::VectorXd q_scalar = z_scalar.colwise().squaredNorm();

    for (Eigen::Index s = 0; s < shape.tasks; ++s) {
      double prior = model.blocks.task(s, s) * sigma2 * u_diag;
      for (Eigen::Index t = 0; t < n_test; ++t) {
        for (Eigen::Index j = 0; j < n_star; ++j) {
          post.mean[s](t, j) = means[(s * n_test + t) * n_star + j];
          post.variance[s](t, j) = prior - q_task[s] * q_func[t] * q_scalar[j];
        }
      }
    }
    return post;
  }

  // Noise path.
  const KroneckerEigen& eig = *model.eigen;
  Eigen::VectorXd means = kron_matvec(k_task, k_func_star, k_scalar_star, model.weights);

  Eigen::MatrixXd e_task = eig.task_vectors.transpose() * k_task;            // S x S
  Eigen::MatrixXd e_func = eig.functional_vectors.transpose() * k_func_star.transpose();
  Eigen::MatrixXd e_scalar = eig.scalar_vectors.transpose() * k_scalar_star.transpose();
  Eigen::MatrixXd e_task2 = e_task.cwiseAbs2();
  Eigen::MatrixXd e_func2 = e_func.cwiseAbs2();
  Eigen::MatrixXd e_scalar2 = e_scalar.cwiseAbs2();

  // g(p, j) = sum_j' e_scalar2(j', j) / (prod_values[p] * l_u[j'] + noise),
  // with p running over the (task, replicate) eigen pairs.
  Eigen::MatrixXd g(shape.tasks * shape.replicates, n_star);
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      double sf = eig.task_values[s] * eig.functional_values[i];
      Eigen::ArrayXd denom = (sf * eig.scalar_values.array() + noise);
      g.row(s * shape.replicates + i) =
          (e_scalar2.array().colwise() / denom).colwise().sum();
    }
  }

  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    double prior = model.blocks.task(s, s) * sigma2 * u_diag + noise;
    for (Eigen::Index t = 0; t < n_test; ++t) {
      // reduction(p) = e_task2(:, s) (x) e_func2(:, t) contracted with g(:, j)
      Eigen::VectorXd pair(shape.tasks * shape.replicates);
      for (Eigen::Index sp = 0; sp < shape.tasks; ++sp) {
        pair.segment(sp * shape.replicates, shape.replicates) =
            e_task2(sp, s) * e_func2.col(t);
      }
      Eigen::RowVectorXd reduction = pair.transpose() * g;
      for (Eigen::Index j = 0; j < n_star; ++j) {
        post.mean[s](t, j) = means[(s * n_test + t) * n_star + j];
        post.variance[s](t, j) = prior - reduction[j];
      }
    }
  }
  return post;
}

std::vector<ResponseTensor> sample_prior(const Hyperparameters& theta, const EncodedInputs& enc,
                                         const Eigen::VectorXd& scalar_grid,
                                         const KernelConfig& kernel, int n_draws,
                                         std::uint64_t seed) {
  theta.validate();
  CovBlocks blocks = build_blocks(theta.task_factor(), theta.sigma2(), theta.lengthscales_f(),
                                  theta.lengthscale_u(), enc, scalar_grid, kernel);
  KroneckerCholesky kc = block_cholesky(blocks);
  const TensorShape shape = kc.shape();

  std::vector<ResponseTensor> draws;
  draws.reserve(n_draws);
  for (int d = 0; d < n_draws; ++d) {
    RandomStream stream(seed, "prior-draw", static_cast<std::uint64_t>(d));
    Eigen::VectorXd z = stream.normal_vector(shape.total());
    draws.emplace_back(shape, kron_matvec(kc.task, kc.functional, kc.scalar, z));
  }
  return draws;
}

}  // namespace fmtgp
