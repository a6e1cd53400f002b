#pragma once

// Run configuration, command pipelines and report files behind the ssmlab CLI.
//
// Each run writes into its output directory: the command's reports,
// metrics.json, and manifest.json (resolved config, seed, tool version and
// SHA-256 of every input and output file).

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssmlab/implicit_attention.hpp"
#include "ssmlab/steering.hpp"
#include "ssmlab/subspace_analytics.hpp"
#include "ssmlab/tasks_harness.hpp"

namespace ssmlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitAcceptance = 4;

inline constexpr const char* kToolVersion = "0.1.0";

/// Invalid configuration: bad key, value, path or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

const std::vector<std::string>& commands();

struct AnalysisOptions {
  std::vector<std::size_t> layers;  // empty: every layer
  HookSite site = HookSite::kScanOutput;
  double tau = 0.01;
  std::size_t max_sequences = 0;  // 0: the whole eval split
  double theta_spike = 0.1;
  AnomalyDirection direction = AnomalyDirection::kSpike;
  std::size_t head_size = 0;
  HeadVariant variant = HeadVariant::kBoth;
  std::size_t sequence = 0;  // eval sequence dumped by dump-attention
};

struct SteerOptions {
  std::optional<std::size_t> layer;             // default: last layer
  std::optional<std::filesystem::path> spec;    // apply this spec instead of searching
  std::vector<double> grid = default_grid();
  PolicyFactors factors;
  double tuning_fraction = 0.5;
};

struct SaeOptions {
  std::optional<std::size_t> layer;  // default: last layer
  double l1_weight = 1e-3;
  std::size_t steps = 500;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::size_t dict_size = 16;
  double alpha = 0.1;
  std::size_t dict_iterations = 50;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> checkpoint;
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  AnalysisOptions analysis;
  SteerOptions steer;
  SaeOptions sae;
  std::vector<std::filesystem::path> inputs;  // compare: run directories
  nlohmann::json resolved;                    // effective configuration, paths absolute
};

/// Applies "dotted.key=value"; the value is parsed as JSON when it parses,
/// otherwise taken as a string.
void set_override(nlohmann::json& config, const std::string& assignment);

/// Checks keys and values, resolves relative paths against `base_dir`, and
/// lets `seed_env` (the SSMLAB_SEED value, may be null) replace the seed.
RunConfig parse_run_config(const nlohmann::json& config, const std::filesystem::path& base_dir,
                           const char* seed_env = nullptr);

/// Runs the command; returns an exit code and never throws.
int run(const RunConfig& config, std::ostream& log);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Shortest round-trip decimal form, used for every number in CSV output.
std::string format_number(double value);

}  // namespace ssmlab::cli
