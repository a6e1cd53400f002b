// ssmlab: train, analyze, ablate, steer, sae, dump-attention, compare.
//
//   ssmlab <command> [--config run.json] [--out DIR] [--checkpoint PATH]
//                    [--seed N] [--set key.path=value ...]
//
// Flags override the config file; SSMLAB_SEED overrides the file's seed and
// --seed overrides both. Exit codes: 0 ok, 2 config error, 3 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ssmlab/cli_reports.hpp"

namespace cli = ssmlab::cli;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Selective state-space model lab: training, interpretability analyses and steering"};
  app.require_subcommand(1);
  std::string config_path, out_dir, checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  for (const auto& name : cli::commands()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory");
    sub->add_option("--checkpoint", checkpoint, "model checkpoint");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--set", sets, "override, e.g. --set task.kind=needle")->allow_extra_args(false);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    nlohmann::json config = nlohmann::json::object();
    fs::path base = fs::current_path();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      config = nlohmann::json::parse(in, nullptr, false);
      if (config.is_discarded()) throw cli::ConfigError(config_path + " is not valid JSON");
      if (!config.is_object()) throw cli::ConfigError(config_path + ": expected a JSON object");
      if (config.contains("command") && config["command"] != command) {
        throw cli::ConfigError(config_path + " is a '" + config["command"].get<std::string>() +
                               "' config, not '" + command + "'");
      }
      base = fs::absolute(config_path).parent_path();
    }
    config["command"] = command;
    for (const auto& s : sets) cli::set_override(config, s);
    // Paths given as flags are relative to the working directory.
    if (!out_dir.empty()) config["output_dir"] = fs::absolute(out_dir).string();
    if (!checkpoint.empty()) config["checkpoint"] = fs::absolute(checkpoint).string();
    const char* env_seed = std::getenv("SSMLAB_SEED");
    if (seed) {
      config["seed"] = *seed;
      env_seed = nullptr;
    }
    const cli::RunConfig run_config = cli::parse_run_config(config, base, env_seed);
    return cli::run(run_config, std::cerr);
  } catch (const cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitRuntime;
  }
}
