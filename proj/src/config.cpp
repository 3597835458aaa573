#include "fmtgp/config.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "fmtgp/dataio.hpp"
#include "fmtgp/errors.hpp"

namespace fmtgp {

using nlohmann::json;

namespace {

// Wrapper that tracks which keys were consumed so unknown keys fail loudly.
class Section {
 public:
  Section(const json& j, std::string path) : json_(j), path_(std::move(path)) {
    if (!json_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }
  ~Section() = default;

  bool has(const std::string& key) {
    consumed_.insert(key);
    return json_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    consumed_.insert(key);
    if (!json_.contains(key)) return fallback;
    try {
      return json_.at(key).get<T>();
    } catch (const json::exception& err) {
      throw ConfigError(path_ + "." + key + ": " + err.what());
    }
  }

  const json& raw(const std::string& key) {
    consumed_.insert(key);
    return json_.at(key);
  }

  Section child(const std::string& key) {
    consumed_.insert(key);
    return Section(json_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : json_.items()) {
      (void)value;
      if (!consumed_.count(key)) {
        throw ConfigError("unknown config key '" + path_ + "." + key + "'");
      }
    }
  }

 private:
  const json& json_;
  std::string path_;
  std::set<std::string> consumed_;
};

std::pair<double, double> range_from(Section& section, const std::string& key,
                                     std::pair<double, double> fallback) {
  if (!section.has(key)) return fallback;
  const json& j = section.raw(key);
  if (!j.is_array() || j.size() != 2) {
    throw ConfigError("config range '" + key + "' must be [lo, hi]");
  }
  return {j.at(0).get<double>(), j.at(1).get<double>()};
}

KernelConfig kernel_from_section(Section& section) {
  KernelConfig config;
  if (section.has("functional")) {
    Section functional = section.child("functional");
    config.functional_nu =
        matern_nu_from_string(functional.get<std::string>("nu", "2.5"));
    functional.finish();
  }
  if (section.has("scalar")) {
    Section scalar = section.child("scalar");
    config.scalar.kind =
        scalar_kernel_kind_from_string(scalar.get<std::string>("kind", "matern"));
    config.scalar.nu = matern_nu_from_string(scalar.get<std::string>("nu", "2.5"));
    if (scalar.has("periodic")) {
      Section periodic = scalar.child("periodic");
      config.scalar.periodic.lengthscale = periodic.get<double>("lengthscale", 0.5);
      config.scalar.periodic.period = periodic.get<double>("period", 1.0);
      periodic.finish();
    }
    scalar.finish();
  }
  return config;
}

}  // namespace

FitConfig ExperimentConfig::fit_config() const {
  FitConfig config;
  config.adam = optimizer.adam;
  config.init = optimizer.init;
  config.kernel = kernel;
  config.use_noise = optimizer.use_noise;
  config.optimize_task_factor = optimizer.optimize_task_factor;
  config.n_restart = optimizer.n_restart;
  config.seed = seed;
  return config;
}

ExperimentConfig config_from_json(const json& root_json) {
  ExperimentConfig config;
  Section root(root_json, "config");

  config.seed = root.get<std::uint64_t>("seed", 0);
  config.jobs = root.get<int>("jobs", 1);
  if (config.jobs < 1) throw ConfigError("config.jobs must be >= 1");

  if (root.has("generator")) {
    Section gen = root.child("generator");
    RayleighConfig& g = config.generator;
    g.replicates = gen.get<int>("replicates", g.replicates);
    g.tasks = gen.get<int>("tasks", g.tasks);
    g.scalar_points = gen.get<int>("scalar_points", g.scalar_points);
    g.input_points = gen.get<int>("input_points", g.input_points);
    g.u_min = gen.get<double>("u_min", g.u_min);
    g.u_max = gen.get<double>("u_max", g.u_max);
    auto rho = range_from(gen, "rho_range", {g.rho_min, g.rho_max});
    g.rho_min = rho.first;
    g.rho_max = rho.second;
    auto alpha = range_from(gen, "alpha_range", {g.alpha_min, g.alpha_max});
    g.alpha_min = alpha.first;
    g.alpha_max = alpha.second;
    if (gen.has("task_cov")) {
      const json& tc = gen.raw("task_cov");
      Eigen::Index n = static_cast<Eigen::Index>(tc.size());
      Eigen::MatrixXd cov(n, n);
      for (Eigen::Index r = 0; r < n; ++r) {
        if (static_cast<Eigen::Index>(tc.at(r).size()) != n) {
          throw ConfigError("generator.task_cov must be square");
        }
        for (Eigen::Index c = 0; c < n; ++c) cov(r, c) = tc.at(r).at(c).get<double>();
      }
      g.task_cov = cov;
    } else if (g.tasks != g.task_cov.rows()) {
      // default: unit diagonal, 0.85 everywhere off the diagonal
      g.task_cov = Eigen::MatrixXd::Constant(g.tasks, g.tasks, 0.85);
      g.task_cov.diagonal().setOnes();
    }
    g.sigma2 = gen.get<double>("sigma2", g.sigma2);
    if (gen.has("lengthscales_f")) {
      const json& ls = gen.raw("lengthscales_f");
      g.lengthscales_f.resize(static_cast<Eigen::Index>(ls.size()));
      for (Eigen::Index d = 0; d < g.lengthscales_f.size(); ++d) {
        g.lengthscales_f[d] = ls.at(d).get<double>();
      }
    }
    g.lengthscale_u = gen.get<double>("lengthscale_u", g.lengthscale_u);
    g.noise_sigma2 = gen.get<double>("noise_sigma2", g.noise_sigma2);
    g.encoding_dim = gen.get<int>("encoding_dim", g.encoding_dim);
    if (gen.has("kernel")) {
      Section kernel = gen.child("kernel");
      g.kernel = kernel_from_section(kernel);
      kernel.finish();
    }
    gen.finish();
    g.seed = config.seed;
  }

  if (root.has("dataset")) {
    Section dataset = root.child("dataset");
    config.dataset.channels = dataset.get<std::vector<std::string>>("channels", {});
    config.dataset.outputs = dataset.get<std::string>("outputs", "");
    dataset.finish();
    if (config.dataset.channels.empty() || config.dataset.outputs.empty()) {
      throw ConfigError("config.dataset needs both 'channels' and 'outputs'");
    }
    config.use_generator = false;
  }

  if (root.has("encoding")) {
    Section enc = root.child("encoding");
    config.encoding.kind = basis_kind_from_string(enc.get<std::string>("kind", "pca"));
    config.encoding.dim = enc.get<int>("dim", config.encoding.dim);
    if (enc.has("inertia") && !enc.raw("inertia").is_null()) {
      config.encoding.inertia = enc.raw("inertia").get<double>();
    }
    config.encoding.bspline_order = enc.get<int>("bspline_order", config.encoding.bspline_order);
    config.encoding.bspline_stage_dim =
        enc.get<int>("bspline_stage_dim", config.encoding.bspline_stage_dim);
    config.encoding.wavelet_level = enc.get<int>("wavelet_level", config.encoding.wavelet_level);
    config.encoding.whiten = enc.get<bool>("whiten", config.encoding.whiten);
    enc.finish();
    if (config.encoding.dim < 1) throw ConfigError("encoding.dim must be positive");
  }

  if (root.has("kernel")) {
    Section kernel = root.child("kernel");
    config.kernel = kernel_from_section(kernel);
    kernel.finish();
  } else if (config.use_generator) {
    config.kernel = config.generator.kernel;
  }

  if (root.has("optimizer")) {
    Section opt = root.child("optimizer");
    OptimizerConfig& o = config.optimizer;
    o.adam.learning_rate = opt.get<double>("lr", o.adam.learning_rate);
    o.adam.beta1 = opt.get<double>("beta1", o.adam.beta1);
    o.adam.beta2 = opt.get<double>("beta2", o.adam.beta2);
    o.adam.weight_decay = opt.get<double>("weight_decay", o.adam.weight_decay);
    o.adam.clip_norm = opt.get<double>("clip_norm", o.adam.clip_norm);
    o.adam.early_stop_tol = opt.get<double>("early_stop_tol", o.adam.early_stop_tol);
    o.adam.early_stop_patience = opt.get<int>("early_stop_patience", o.adam.early_stop_patience);
    o.adam.max_iter = opt.get<int>("max_iter", o.adam.max_iter);
    o.n_restart = opt.get<int>("n_restart", o.n_restart);
    o.use_noise = opt.get<bool>("use_noise", o.use_noise);
    if (opt.has("optimize_task_factor") && !opt.raw("optimize_task_factor").is_null()) {
      o.optimize_task_factor = opt.raw("optimize_task_factor").get<bool>();
    }
    if (opt.has("init")) {
      Section init = opt.child("init");
      o.init.lengthscale_f = range_from(init, "lengthscale_f", o.init.lengthscale_f);
      o.init.lengthscale_u = range_from(init, "lengthscale_u", o.init.lengthscale_u);
      o.init.sigma2 = range_from(init, "sigma2", o.init.sigma2);
      o.init.sigma2_noise = range_from(init, "sigma2_noise", o.init.sigma2_noise);
      o.init.task_offdiag = range_from(init, "task_offdiag", o.init.task_offdiag);
      o.init.task_log_diag = range_from(init, "task_log_diag", o.init.task_log_diag);
      init.finish();
    }
    opt.finish();
    if (o.adam.max_iter < 1) throw ConfigError("optimizer.max_iter must be >= 1");
    if (o.n_restart < 1) throw ConfigError("optimizer.n_restart must be >= 1");
  }

  if (root.has("evaluation")) {
    Section eval = root.child("evaluation");
    config.evaluation.delta = eval.get<double>("delta", config.evaluation.delta);
    config.evaluation.n_test = eval.get<int>("n_test", config.evaluation.n_test);
    config.evaluation.loo_reoptimize =
        eval.get<bool>("loo_reoptimize", config.evaluation.loo_reoptimize);
    config.evaluation.train_sizes =
        eval.get<std::vector<int>>("train_sizes", config.evaluation.train_sizes);
    eval.finish();
    if (config.evaluation.n_test < 0) throw ConfigError("evaluation.n_test must be >= 0");
  }

  if (root.has("benchmark")) {
    Section bench = root.child("benchmark");
    config.benchmark.sizes = bench.get<std::vector<int>>("sizes", config.benchmark.sizes);
    config.benchmark.tasks = bench.get<int>("tasks", config.benchmark.tasks);
    config.benchmark.scalar_points =
        bench.get<int>("scalar_points", config.benchmark.scalar_points);
    config.benchmark.reps = bench.get<int>("reps", config.benchmark.reps);
    config.benchmark.max_n = bench.get<Eigen::Index>("max_n", config.benchmark.max_n);
    bench.finish();
    if (config.benchmark.reps < 1) throw ConfigError("benchmark.reps must be >= 1");
  }

  config.model_path = root.get<std::string>("model_path", "");
  root.finish();
  return config;
}

json config_to_json(const ExperimentConfig& config) {
  json j;
  j["seed"] = config.seed;
  j["jobs"] = config.jobs;

  if (config.use_generator) {
    const RayleighConfig& g = config.generator;
    json task_cov = json::array();
    for (Eigen::Index r = 0; r < g.task_cov.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < g.task_cov.cols(); ++c) row.push_back(g.task_cov(r, c));
      task_cov.push_back(std::move(row));
    }
    json ls = json::array();
    for (Eigen::Index d = 0; d < g.lengthscales_f.size(); ++d) ls.push_back(g.lengthscales_f[d]);
    j["generator"] = {{"replicates", g.replicates},
                      {"tasks", g.tasks},
                      {"scalar_points", g.scalar_points},
                      {"input_points", g.input_points},
                      {"u_min", g.u_min},
                      {"u_max", g.u_max},
                      {"rho_range", {g.rho_min, g.rho_max}},
                      {"alpha_range", {g.alpha_min, g.alpha_max}},
                      {"task_cov", task_cov},
                      {"sigma2", g.sigma2},
                      {"lengthscales_f", ls},
                      {"lengthscale_u", g.lengthscale_u},
                      {"noise_sigma2", g.noise_sigma2},
                      {"encoding_dim", g.encoding_dim},
                      {"kernel", kernel_config_to_json(g.kernel)}};
  } else {
    j["dataset"] = {{"channels", config.dataset.channels}, {"outputs", config.dataset.outputs}};
  }

  j["encoding"] = {{"kind", to_string(config.encoding.kind)},
                   {"dim", config.encoding.dim},
                   {"inertia", config.encoding.inertia ? json(*config.encoding.inertia) : json()},
                   {"bspline_order", config.encoding.bspline_order},
                   {"bspline_stage_dim", config.encoding.bspline_stage_dim},
                   {"wavelet_level", config.encoding.wavelet_level},
                   {"whiten", config.encoding.whiten}};
  j["kernel"] = kernel_config_to_json(config.kernel);

  const OptimizerConfig& o = config.optimizer;
  j["optimizer"] = {
      {"lr", o.adam.learning_rate},
      {"beta1", o.adam.beta1},
      {"beta2", o.adam.beta2},
      {"weight_decay", o.adam.weight_decay},
      {"clip_norm", o.adam.clip_norm},
      {"early_stop_tol", o.adam.early_stop_tol},
      {"early_stop_patience", o.adam.early_stop_patience},
      {"max_iter", o.adam.max_iter},
      {"n_restart", o.n_restart},
      {"use_noise", o.use_noise},
      {"optimize_task_factor",
       o.optimize_task_factor ? json(*o.optimize_task_factor) : json()},
      {"init",
       {{"lengthscale_f", {o.init.lengthscale_f.first, o.init.lengthscale_f.second}},
        {"lengthscale_u", {o.init.lengthscale_u.first, o.init.lengthscale_u.second}},
        {"sigma2", {o.init.sigma2.first, o.init.sigma2.second}},
        {"sigma2_noise", {o.init.sigma2_noise.first, o.init.sigma2_noise.second}},
        {"task_offdiag", {o.init.task_offdiag.first, o.init.task_offdiag.second}},
        {"task_log_diag", {o.init.task_log_diag.first, o.init.task_log_diag.second}}}}};

  j["evaluation"] = {{"delta", config.evaluation.delta},
                     {"n_test", config.evaluation.n_test},
                     {"loo_reoptimize", config.evaluation.loo_reoptimize},
                     {"train_sizes", config.evaluation.train_sizes}};
  j["benchmark"] = {{"sizes", config.benchmark.sizes},
                    {"tasks", config.benchmark.tasks},
                    {"scalar_points", config.benchmark.scalar_points},
                    {"reps", config.benchmark.reps},
                    {"max_n", config.benchmark.max_n}};
  if (!config.model_path.empty()) j["model_path"] = config.model_path;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& err) {
    throw ConfigError("cannot parse config " + path.string() + ": " + err.what());
  }
  return config_from_json(j);
}

}  // namespace fmtgp
