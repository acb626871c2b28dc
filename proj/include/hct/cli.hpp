#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "hct/model.hpp"
#include "hct/training.hpp"

namespace hct::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsageError = 2, kNumericalFailure = 3 };

/// Everything one subcommand needs, merged from the JSON config file and the
/// command-line flags (flags win).
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;  // default for every seed not set explicitly
  std::string data, out;
  // synth
  std::size_t patients = 20, slices = 4, size = 64;
  // train / eval
  std::string checkpoint, resume;
  double threshold = 0.5;
  // ablate
  std::size_t folds = 5;
  std::vector<std::string> variants{"EF-TN", "LF-TN", "HCT"};
  // gradcheck
  std::size_t gradcheck_seeds = 5;
  std::vector<std::string> ops;
  std::string perturb_op;

  /// Sparse overrides; resolved against defaults, a dataset or a checkpoint.
  nlohmann::json model = nlohmann::json::object();
  nlohmann::json train = nlohmann::json::object();
  bool size_given = false;

  nlohmann::json to_json() const;
};

/// Reads the recognized keys of a config object; unknown keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig defaults = {});

/// Model config with the run's overrides on top of `base`; h and w follow
/// `size` when it was given. The run seed fills an unset model seed.
model::ModelConfig resolve_model(const RunConfig& run, model::ModelConfig base = {}, bool inherit_seed = true);
train::TrainConfig resolve_train(const RunConfig& run);

/// Parses argv and runs one subcommand; returns an ExitCode.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hct::cli
