#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "opcal/selfcal.hpp"

namespace opcal {

// Exit codes shared by the CLI commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNotConverged = 2;
inline constexpr int kExitVerifyFailed = 3;

struct RunSummary {
  std::string config_echo;  // JSON text of the effective configuration
  double truth_response = 0.0;
  double gibbs_response = 0.0;
  double gibbs_sigma = 0.0;
  double map_response = 0.0;
  double map_sigma = 0.0;
  int iterations = 0;
  bool converged = false;
  double final_grad_norm = 0.0;
  double wall_time = 0.0;
};

// Parses the JSON configuration text; unknown keys and malformed values
// throw std::invalid_argument with a description of the offending field.
ModelConfig parse_config(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string config_to_json(const ModelConfig& config);

// Writes dataset.csv and truth.json into out_dir.
int cmd_simulate(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out_dir);

// Runs the inference on a dataset produced by cmd_simulate (truth.json is
// expected next to the csv) and writes reconstruction.csv, summary.json and,
// unless disabled, fig1.svg / fig2.svg.
int cmd_infer(const std::string& config_path, const std::string& dataset_path,
              const std::string& out_dir, bool plots = true);

// Simulate + infer + MAP over seeds 1..n_seeds; writes compare.csv and
// compare_stats.json. Individual seed failures are recorded per row.
int cmd_compare(const std::string& config_path, int n_seeds, const std::string& out_dir);

// Runs the verification suites and prints a pass/fail table.
int cmd_verify(const std::string& level, double inject_gradient_error = 0.0);

}  // namespace opcal
