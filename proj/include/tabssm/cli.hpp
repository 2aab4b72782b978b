#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "tabssm/pipeline.hpp"

namespace tabssm {

/// Everything a run needs, merged from the flat JSON config file, built-in
/// defaults and command-line overrides (flags win). Unknown config keys are
/// rejected.
struct RunSettings {
  PipelineConfig pipeline;
  std::uint64_t seed = 0;
  std::string data_path;
  std::string schema_path;
  std::string out_dir = ".";
};

/// Command-line overrides; unset fields defer to the config file / defaults.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> kernel;  // 0 selects kernel = sequence length
  std::optional<std::string> pooling, arch, head;
  std::optional<bool> bidirectional, interaction;
  std::optional<std::size_t> folds, max_epochs, batch_size, d, layers, state_dim, max_bins;
};

RunSettings resolve_settings(const std::string& config_path, const std::string& data_path,
                             const std::string& schema_path, const std::string& out_dir,
                             const CliOverrides& overrides);

// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
int cmd_train(const RunSettings& settings);
int cmd_cv(const RunSettings& settings);
int cmd_ablate_ordering(const RunSettings& settings, const std::string& mode,
                        std::size_t shuffles);
int cmd_compare(const std::string& dir_a, const std::string& dir_b,
                const std::string& out_dir);
int cmd_synth(std::uint64_t seed, const std::string& out_dir);

}  // namespace tabssm
