#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fmtgp/mtgp.hpp"
#include "fmtgp/synthgen.hpp"

namespace fmtgp {

// Round-trip formatting for all numeric file output ("%.17g").
std::string format_double(double value);

// Write-then-rename so partially written files never appear under the final
// name. The parent directory must exist.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

// Channel CSV: header `u,rep_1,...,rep_n`, first column the grid, one
// replicate per remaining column.
void write_channel_csv(const std::filesystem::path& path, const Eigen::VectorXd& grid,
                       const Eigen::MatrixXd& samples);
std::pair<Eigen::VectorXd, Eigen::MatrixXd> read_channel_csv(const std::filesystem::path& path);

// Outputs CSV: header `s,i,j,u,y` with 1-based task/replicate/grid indices.
void write_outputs_csv(const std::filesystem::path& path, const ResponseTensor& responses,
                       const Eigen::VectorXd& scalar_grid);
std::pair<ResponseTensor, Eigen::VectorXd> read_outputs_csv(const std::filesystem::path& path);

nlohmann::json basis_to_json(const Basis& basis);
Basis basis_from_json(const nlohmann::json& j);

nlohmann::json hyperparameters_to_json(const Hyperparameters& theta);
Hyperparameters hyperparameters_from_json(const nlohmann::json& j);

nlohmann::json kernel_config_to_json(const KernelConfig& config);
KernelConfig kernel_config_from_json(const nlohmann::json& j);

// Fitted-model document: format version, hyperparameters, kernel, frozen
// bases and training data, final NLL and restart metadata.
nlohmann::json model_to_json(const FittedModel& model);
FittedModel model_from_json(const nlohmann::json& j);
void save_model(const std::filesystem::path& path, const FittedModel& model);
FittedModel load_model(const std::filesystem::path& path);

nlohmann::json theta0_to_json(const Hyperparameters& theta, const KernelConfig& kernel);

}  // namespace fmtgp
