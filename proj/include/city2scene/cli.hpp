#pragma once

#include "city2scene/dataset.hpp"

#include <nlohmann/json.hpp>

namespace city2scene {

/// Options of the `synth` subcommand: the generator config plus the split.
struct SynthSpec {
  SyntheticConfig generator;
  double test_fraction = 0.25;
  std::uint64_t split_seed = 0;
};

nlohmann::json to_json(const SynthSpec& spec);
/// Strict, like the stage config reader.
SynthSpec synth_spec_from_json(const nlohmann::json& doc);

/// Entry point of the command-line tool. Returns the process exit code:
/// 0 on success, 1 on runtime or config errors, 2 on usage errors.
int run_cli(int argc, char** argv);

}  // namespace city2scene
