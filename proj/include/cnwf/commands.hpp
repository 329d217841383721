/// @file commands.hpp
/// @brief Command implementations behind the CLI: mesh/dataset production,
///        training, evaluation, and the coverage experiments. Each command
///        writes its outputs plus a reproducibility manifest under the
///        configured output directory.
#pragma once

#include <stdexcept>
#include <string>

#include "cnwf/runconfig.hpp"

namespace cnwf {

/// An explicitly requested check (descent verdict, rate bound) failed. The
/// CLI maps this to its own exit code, distinct from validation and
/// numerical errors.
struct CheckError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void cmd_mesh(const RunConfig& cfg);
void cmd_datagen(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
              const std::string& baseline_checkpoint = "",
              bool oracle = false);

/// mode: "bump" (contraction-rate experiment), "oracle" (fixed true-density
/// descent), or "model" (trial campaign driven by a trained checkpoint).
void cmd_coverage(const RunConfig& cfg, const std::string& mode,
                  const std::string& checkpoint = "");

}  // namespace cnwf
