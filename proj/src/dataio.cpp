#include "fmtgp/dataio.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fmtgp/errors.hpp"

namespace fmtgp {

using nlohmann::json;

std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  fs::path parent = path.parent_path();
  if (!parent.empty() && !fs::exists(parent)) {
    throw ConfigError("output directory does not exist: " + parent.string());
  }
  fs::path temp = path;
  temp += ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open for writing: " + temp.string());
    out << content;
    if (!out) throw ConfigError("write failed: " + temp.string());
  }
  fs::rename(temp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

namespace {

double parse_double(std::string_view token, const std::filesystem::path& path) {
  double value = 0.0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("bad numeric field '" + std::string(token) + "' in " + path.string());
  }
  return value;
}

std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::string content = read_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t nl = content.find('\n', start);
    if (nl == std::string::npos) nl = content.size();
    std::string line = content.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
    start = nl + 1;
  }
  return lines;
}

}  // namespace

void write_channel_csv(const std::filesystem::path& path, const Eigen::VectorXd& grid,
                       const Eigen::MatrixXd& samples) {
  if (samples.cols() != grid.size()) throw ShapeError("write_channel_csv: shape mismatch");
  std::ostringstream out;
  out << "u";
  for (Eigen::Index i = 0; i < samples.rows(); ++i) out << ",rep_" << (i + 1);
  out << "\n";
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    out << format_double(grid[k]);
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
      out << ',' << format_double(samples(i, k));
    }
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> read_channel_csv(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  if (lines.size() < 3) throw ConfigError("channel CSV too short: " + path.string());
  auto header = split_csv_line(lines[0]);
  if (header.empty() || header[0] != "u") {
    throw ConfigError("channel CSV header must start with 'u': " + path.string());
  }
  Eigen::Index n_rep = static_cast<Eigen::Index>(header.size()) - 1;
  if (n_rep < 1) throw ConfigError("channel CSV has no replicate columns: " + path.string());
  Eigen::Index n_grid = static_cast<Eigen::Index>(lines.size()) - 1;

  Eigen::VectorXd grid(n_grid);
  Eigen::MatrixXd samples(n_rep, n_grid);
  for (Eigen::Index k = 0; k < n_grid; ++k) {
    auto fields = split_csv_line(lines[k + 1]);
    if (static_cast<Eigen::Index>(fields.size()) != n_rep + 1) {
      throw ConfigError("channel CSV has a ragged row: " + path.string());
    }
    grid[k] = parse_double(fields[0], path);
    for (Eigen::Index i = 0; i < n_rep; ++i) samples(i, k) = parse_double(fields[i + 1], path);
  }
  return {grid, samples};
}

void write_outputs_csv(const std::filesystem::path& path, const ResponseTensor& responses,
                       const Eigen::VectorXd& scalar_grid) {
  const TensorShape shape = responses.shape();
  if (scalar_grid.size() != shape.grid) throw ShapeError("write_outputs_csv: grid mismatch");
  std::ostringstream out;
  out << "s,i,j,u,y\n";
  for (Eigen::Index s = 0; s < shape.tasks; ++s) {
    for (Eigen::Index i = 0; i < shape.replicates; ++i) {
      for (Eigen::Index j = 0; j < shape.grid; ++j) {
        out << (s + 1) << ',' << (i + 1) << ',' << (j + 1) << ','
            << format_double(scalar_grid[j]) << ',' << format_double(responses(s, i, j)) << "\n";
      }
    }
  }
  write_file_atomic(path, out.str());
}

std::pair<ResponseTensor, Eigen::VectorXd> read_outputs_csv(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  if (lines.size() < 2) throw ConfigError("outputs CSV too short: " + path.string());
  if (lines[0] != "s,i,j,u,y") {
    throw ConfigError("outputs CSV must have header 's,i,j,u,y': " + path.string());
  }

  Eigen::Index max_s = 0, max_i = 0, max_j = 0;
  struct Row {
    Eigen::Index s, i, j;
    double u, y;
  };
  std::vector<Row> rows;
  rows.reserve(lines.size() - 1);
  for (std::size_t k = 1; k < lines.size(); ++k) {
    auto fields = split_csv_line(lines[k]);
    if (fields.size() != 5) throw ConfigError("outputs CSV has a ragged row: " + path.string());
    Row row;
    row.s = static_cast<Eigen::Index>(parse_double(fields[0], path)) - 1;
    row.i = static_cast<Eigen::Index>(parse_double(fields[1], path)) - 1;
    row.j = static_cast<Eigen::Index>(parse_double(fields[2], path)) - 1;
    row.u = parse_double(fields[3], path);
    row.y = parse_double(fields[4], path);
    if (row.s < 0 || row.i < 0 || row.j < 0) {
      throw ConfigError("outputs CSV indices must be 1-based: " + path.string());
    }
    max_s = std::max(max_s, row.s);
    max_i = std::max(max_i, row.i);
    max_j = std::max(max_j, row.j);
    rows.push_back(row);
  }

  TensorShape shape{max_s + 1, max_i + 1, max_j + 1};
  if (static_cast<Eigen::Index>(rows.size()) != shape.total()) {
    throw ConfigError("outputs CSV is not tensor-structured (missing or duplicate triplets): " +
                      path.string());
  }
  ResponseTensor responses(shape);
  Eigen::VectorXd grid = Eigen::VectorXd::Constant(shape.grid, std::nan(""));
  std::vector<char> seen(static_cast<std::size_t>(shape.total()), 0);
  for (const Row& row : rows) {
    auto flat = static_cast<std::size_t>((row.s * shape.replicates + row.i) * shape.grid + row.j);
    if (seen[flat]) throw ConfigError("outputs CSV has a duplicate triplet: " + path.string());
    seen[flat] = 1;
    responses(row.s, row.i, row.j) = row.y;
    if (std::isnan(grid[row.j])) {
      grid[row.j] = row.u;
    } else if (grid[row.j] != row.u) {
      throw ConfigError("outputs CSV has inconsistent u for a grid index: " + path.string());
    }
  }
  return {std::move(responses), std::move(grid)};
}

namespace {

json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(j.size());
  Eigen::Index i = 0;
  for (const auto& item : j) v[i++] = item.get<double>();
  return v;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(r);
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError("ragged matrix in JSON document");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(c).get<double>();
  }
  return m;
}

constexpr int kModelFormatVersion = 1;

}  // namespace

json basis_to_json(const Basis& basis) {
  json j;
  j["kind"] = to_string(basis.kind);
  j["grid"] = vector_to_json(basis.grid);
  j["atoms"] = matrix_to_json(basis.atoms);
  j["gram"] = matrix_to_json(basis.gram);
  j["mean_curve"] = vector_to_json(basis.mean_curve);
  j["eigenvalues"] = vector_to_json(basis.eigenvalues);
  j["coeff_directions"] = matrix_to_json(basis.coeff_directions);
  j["coeff_mean"] = vector_to_json(basis.coeff_mean);
  j["coeff_scale"] = vector_to_json(basis.coeff_scale);
  j["coeff_eigenvalues"] = vector_to_json(basis.coeff_eigenvalues);
  return j;
}

Basis basis_from_json(const json& j) {
  Basis basis;
  basis.kind = basis_kind_from_string(j.at("kind").get<std::string>());
  basis.grid = vector_from_json(j.at("grid"));
  basis.atoms = matrix_from_json(j.at("atoms"));
  basis.gram = matrix_from_json(j.at("gram"));
  basis.mean_curve = vector_from_json(j.at("mean_curve"));
  basis.eigenvalues = vector_from_json(j.at("eigenvalues"));
  basis.coeff_directions = matrix_from_json(j.at("coeff_directions"));
  basis.coeff_mean = vector_from_json(j.at("coeff_mean"));
  basis.coeff_scale = vector_from_json(j.at("coeff_scale"));
  basis.coeff_eigenvalues = vector_from_json(j.at("coeff_eigenvalues"));
  return basis;
}

json hyperparameters_to_json(const Hyperparameters& theta) {
  json j;
  j["task_raw"] = matrix_to_json(theta.task_raw);
  j["log_sigma2"] = theta.log_sigma2;
  j["log_lengthscales_f"] = vector_to_json(theta.log_lengthscales_f);
  j["log_lengthscale_u"] = theta.log_lengthscale_u;
  if (theta.log_sigma2_noise) {
    j["log_sigma2_noise"] = *theta.log_sigma2_noise;
  } else {
    j["log_sigma2_noise"] = nullptr;
  }
  return j;
}

Hyperparameters hyperparameters_from_json(const json& j) {
  Hyperparameters theta;
  theta.task_raw = matrix_from_json(j.at("task_raw"));
  theta.log_sigma2 = j.at("log_sigma2").get<double>();
  theta.log_lengthscales_f = vector_from_json(j.at("log_lengthscales_f"));
  theta.log_lengthscale_u = j.at("log_lengthscale_u").get<double>();
  if (!j.at("log_sigma2_noise").is_null()) {
    theta.log_sigma2_noise = j.at("log_sigma2_noise").get<double>();
  }
  return theta;
}

json kernel_config_to_json(const KernelConfig& config) {
  json j;
  j["functional"] = {{"nu", to_string(config.functional_nu)}};
  j["scalar"] = {{"kind", to_string(config.scalar.kind)},
                 {"nu", to_string(config.scalar.nu)},
                 {"periodic", {{"lengthscale", config.scalar.periodic.lengthscale},
                               {"period", config.scalar.periodic.period}}}};
  return j;
}

KernelConfig kernel_config_from_json(const json& j) {
  KernelConfig config;
  config.functional_nu = matern_nu_from_string(j.at("functional").at("nu").get<std::string>());
  const json& scalar = j.at("scalar");
  config.scalar.kind = scalar_kernel_kind_from_string(scalar.at("kind").get<std::string>());
  config.scalar.nu = matern_nu_from_string(scalar.at("nu").get<std::string>());
  config.scalar.periodic.lengthscale = scalar.at("periodic").at("lengthscale").get<double>();
  config.scalar.periodic.period = scalar.at("periodic").at("period").get<double>();
  return config;
}

json model_to_json(const FittedModel& model) {
  json j;
  j["format_version"] = kModelFormatVersion;
  j["hyperparameters"] = hyperparameters_to_json(model.theta);
  j["kernel"] = kernel_config_to_json(model.kernel);
  json bases = json::array();
  for (const Basis& basis : model.enc.bases) bases.push_back(basis_to_json(basis));
  j["bases"] = std::move(bases);
  json coeffs = json::array();
  for (const Eigen::MatrixXd& c : model.enc.coefficients) coeffs.push_back(matrix_to_json(c));
  j["coefficients"] = std::move(coeffs);
  j["scalar_grid"] = vector_to_json(model.scalar_grid);
  const TensorShape shape = model.responses.shape();
  j["responses"] = {{"tasks", shape.tasks},
                    {"replicates", shape.replicates},
                    {"grid", shape.grid},
                    {"vec", vector_to_json(model.responses.vec())}};
  j["nll"] = model.nll;
  j["restart_index"] = model.restart_index;
  return j;
}

FittedModel model_from_json(const json& j) {
  int version = j.at("format_version").get<int>();
  if (version != kModelFormatVersion) {
    throw ConfigError("model format version " + std::to_string(version) +
                      " is not compatible with this build (expected " +
                      std::to_string(kModelFormatVersion) + ")");
  }
  FittedModel model;
  model.theta = hyperparameters_from_json(j.at("hyperparameters"));
  model.kernel = kernel_config_from_json(j.at("kernel"));
  for (const auto& basis : j.at("bases")) model.enc.bases.push_back(basis_from_json(basis));
  for (const auto& coeff : j.at("coefficients")) {
    model.enc.coefficients.push_back(matrix_from_json(coeff));
  }
  model.scalar_grid = vector_from_json(j.at("scalar_grid"));
  const json& responses = j.at("responses");
  TensorShape shape{responses.at("tasks").get<Eigen::Index>(),
                    responses.at("replicates").get<Eigen::Index>(),
                    responses.at("grid").get<Eigen::Index>()};
  model.responses = ResponseTensor(shape, vector_from_json(responses.at("vec")));
  model.restart_index = j.at("restart_index").get<int>();
  model.build_caches();
  return model;
}

void save_model(const std::filesystem::path& path, const FittedModel& model) {
  write_file_atomic(path, model_to_json(model).dump(2) + "\n");
}

FittedModel load_model(const std::filesystem::path& path) {
  json j = json::parse(read_file(path));
  return model_from_json(j);
}

json theta0_to_json(const Hyperparameters& theta, const KernelConfig& kernel) {
  json j;
  j["hyperparameters"] = hyperparameters_to_json(theta);
  j["kernel"] = kernel_config_to_json(kernel);
  j["task_cov"] = matrix_to_json(theta.task_factor().covariance());
  j["sigma2"] = theta.sigma2();
  j["lengthscales_f"] = vector_to_json(theta.lengthscales_f());
  j["lengthscale_u"] = theta.lengthscale_u();
  j["sigma2_noise"] = theta.sigma2_noise();
  return j;
}

}  // namespace fmtgp
