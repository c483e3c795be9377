#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "meas/degrade/synth.hpp"
#include "meas/model/config.hpp"
#include "meas/training/training.hpp"

namespace meas::cli {

/// Everything a run needs, read from a `key = value` file with [model],
/// [train] and [data] sections. Unknown sections or keys are errors.
struct RunConfig {
  model::ModelConfig model;
  training::TrainConfig train;
  degrade::DatasetSpec data;
  std::optional<std::uint64_t> eval_seed;  // default: derived from data.seed

  /// Held-out evaluation stream: the training spec with its own seed, no
  /// flips, and train.eval_count samples per task.
  degrade::DatasetSpec eval_spec() const;
  void validate() const;
  /// Canonical text form, parseable by parse_run_config.
  std::string to_text() const;
};

RunConfig parse_run_config(const std::string& text, const std::string& origin = "<string>");
RunConfig load_run_config(const std::string& path);

/// Command-line overrides shared by the subcommands.
struct Overrides {
  std::optional<std::uint64_t> seed;  // model and data seeds
  std::optional<std::size_t> steps;
  std::optional<std::string> out;
};

void apply_overrides(RunConfig& config, const Overrides& overrides);

}  // namespace meas::cli
