#include "fmtgp/synthgen.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "fmtgp/errors.hpp"
#include "fmtgp/rng.hpp"

namespace fmtgp {

void RawDataset::validate() const {
  if (channels.empty()) throw ShapeError("raw dataset: no channels");
  for (const auto& channel : channels) {
    if (channel.rows() != channels.front().rows()) {
      throw ShapeError("raw dataset: replicate count differs across channels");
    }
    if (channel.cols() != input_grid.size()) {
      throw ShapeError("raw dataset: channel width does not match the input grid");
    }
    if (!channel.allFinite()) throw NumericalError("raw dataset: non-finite input values");
  }
  responses.validate_finite();
  const TensorShape shape = responses.shape();
  if (shape.replicates != replicate_count()) {
    throw ShapeError("raw dataset: response replicate count mismatch");
  }
  if (shape.grid != scalar_grid.size()) {
    throw ShapeError("raw dataset: response grid size mismatch");
  }
}

RayleighConfig::RayleighConfig() {
  task_cov.resize(2, 2);
  task_cov << 1.0, 0.85, 0.85, 1.0;
  lengthscales_f = Eigen::VectorXd::Constant(3, 80.0);
  kernel.functional_nu = MaternNu::kFiveHalves;
  kernel.scalar.kind = ScalarKernelKind::kMaternPlusPeriodic;
  kernel.scalar.nu = MaternNu::kFiveHalves;
  kernel.scalar.periodic = PeriodicSpec{0.5, 1.0};
}

void RayleighConfig::validate() const {
  if (replicates < 2) throw ConfigError("generator: needs at least 2 replicates");
  if (tasks < 1) throw ConfigError("generator: needs at least 1 task");
  if (scalar_points < 2 || input_points < 2) throw ConfigError("generator: grids need >= 2 points");
  if (!(u_min < u_max)) throw ConfigError("generator: empty scalar domain");
  if (!(rho_min > 0.0) || !(rho_min < rho_max)) throw ConfigError("generator: bad rho range");
  if (!(alpha_min < alpha_max)) throw ConfigError("generator: bad alpha range");
  if (task_cov.rows() != tasks || task_cov.cols() != tasks) {
    throw ConfigError("generator: task covariance size does not match task count");
  }
  if (lengthscales_f.size() != channel_count()) {
    throw ConfigError("generator: need one functional lengthscale per channel");
  }
  if (!(sigma2 > 0.0) || !(lengthscale_u > 0.0)) {
    throw ConfigError("generator: variance and lengthscale must be positive");
  }
  if (noise_sigma2 < 0.0) throw ConfigError("generator: negative noise variance");
  if (encoding_dim < 1) throw ConfigError("generator: encoding dimension must be positive");
}

Eigen::VectorXd rayleigh_curve(double rho, double alpha, const Eigen::VectorXd& grid) {
  if (!(rho > 0.0)) throw NumericalError("rayleigh_curve: rho must be positive");
  if (!(alpha > 0.0)) throw NumericalError("rayleigh_curve: alpha must be positive");
  const double inv_rho2 = 1.0 / (rho * rho);
  Eigen::VectorXd h =
      (grid.array() * inv_rho2) * (-0.5 * grid.array().square() * inv_rho2).exp();
  double peak = h.maxCoeff();
  if (!(peak > 0.0)) throw NumericalError("rayleigh_curve: degenerate peak on this grid");
  return (alpha / peak) * h;
}

SyntheticDataset generate_dataset(const RayleighConfig& config) {
  config.validate();

  SyntheticDataset out;
  out.kernel = config.kernel;
  out.raw.input_grid =
      Eigen::VectorXd::LinSpaced(config.input_points, config.u_min, config.u_max);
  out.raw.scalar_grid =
      Eigen::VectorXd::LinSpaced(config.scalar_points, config.u_min, config.u_max);

  // Inputs: one (rho, alpha) pair per channel and replicate.
  RandomStream input_stream(config.seed, "rayleigh-inputs");
  out.raw.channels.assign(config.channel_count(),
                          Eigen::MatrixXd(config.replicates, config.input_points));
  for (int i = 0; i < config.replicates; ++i) {
    for (int d = 0; d < config.channel_count(); ++d) {
      double rho = input_stream.uniform(config.rho_min, config.rho_max);
      double alpha = input_stream.uniform(config.alpha_min, config.alpha_max);
      out.raw.channels[d].row(i) =
          rayleigh_curve(rho, alpha, out.raw.input_grid).transpose();
    }
  }

  // The generator samples responses through the same PCA encoding the
  // experiments use.
  EncodingConfig enc_config;
  enc_config.kind = BasisKind::kPca;
  enc_config.dim = config.encoding_dim;
  out.enc = fit_encodings(out.raw.channels, out.raw.input_grid, enc_config);

  Eigen::LLT<Eigen::MatrixXd> task_llt(config.task_cov);
  if (task_llt.info() != Eigen::Success) {
    throw NotPositiveDefiniteError("generator: task covariance is not positive definite");
  }
  out.theta0 = Hyperparameters::from_natural(
      task_llt.matrixL(), config.sigma2, config.lengthscales_f, config.lengthscale_u,
      config.noise_sigma2 > 0.0 ? std::optional<double>(config.noise_sigma2) : std::nullopt);

  std::uint64_t response_seed = RandomStream::mix_seed(config.seed, "responses", 0);
  std::vector<ResponseTensor> draws =
      sample_prior(out.theta0, out.enc, out.raw.scalar_grid, config.kernel, 1, response_seed);
  out.raw.responses = std::move(draws.front());

  if (config.noise_sigma2 > 0.0) {
    RandomStream noise_stream(config.seed, "observation-noise");
    double sd = std::sqrt(config.noise_sigma2);
    Eigen::VectorXd noise = sd * noise_stream.normal_vector(out.raw.responses.vec().size());
    out.raw.responses.vec() += noise;
  }

  out.raw.validate();
  return out;
}

}  // namespace fmtgp
