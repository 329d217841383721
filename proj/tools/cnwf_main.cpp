/// @file cnwf_main.cpp
/// @brief Command-line driver: mesh / datagen / train / eval / coverage
///        subcommands over a shared sectioned config file.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cnwf/commands.hpp"
#include "cnwf/errors.hpp"
#include "cnwf/runconfig.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  int jobs = 1;
};

cnwf::RunConfig load(const GlobalOpts& g) {
  // jobs is accepted for interface stability; every reduction in the
  // pipeline is order-fixed, so execution stays sequential regardless.
  (void)g.jobs;
  return cnwf::load_run_config(g.config_path, g.overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional neural Whitney forms: data, training, evaluation, coverage"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "Config file (sectioned key=value)");
  app.add_option("--set", g.overrides, "Override entries, section.key=value");
  app.add_option("--jobs", g.jobs, "Worker count (reductions are deterministic)");

  auto* mesh_cmd = app.add_subcommand("mesh", "Build the mesh and write a summary");
  auto* datagen_cmd = app.add_subcommand("datagen", "Generate the sample cache");
  auto* train_cmd = app.add_subcommand("train", "Train the model (or a baseline)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_checkpoint;
  std::string baseline_checkpoint;
  bool oracle_eval = false;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Model checkpoint directory");
  eval_cmd->add_option("--baseline-checkpoint", baseline_checkpoint,
                       "Baseline checkpoint directory for side-by-side metrics");
  eval_cmd->add_flag("--oracle", oracle_eval, "Score the true source instead of a model");

  auto* cov_cmd = app.add_subcommand("coverage", "Coverage-control experiments");
  std::string cov_mode = "model";
  std::string cov_checkpoint;
  cov_cmd->add_option("--mode", cov_mode, "bump | oracle | model")
      ->check(CLI::IsMember({"bump", "oracle", "model"}));
  cov_cmd->add_option("--checkpoint", cov_checkpoint, "Model checkpoint (model mode)");

  CLI11_PARSE(app, argc, argv);

  try {
    const cnwf::RunConfig cfg = load(g);
    if (mesh_cmd->parsed()) {
      cnwf::cmd_mesh(cfg);
    } else if (datagen_cmd->parsed()) {
      cnwf::cmd_datagen(cfg);
    } else if (train_cmd->parsed()) {
      cnwf::cmd_train(cfg);
    } else if (eval_cmd->parsed()) {
      cnwf::cmd_eval(cfg, eval_checkpoint, baseline_checkpoint, oracle_eval);
    } else if (cov_cmd->parsed()) {
      cnwf::cmd_coverage(cfg, cov_mode, cov_checkpoint);
    }
  } catch (const cnwf::CheckError& e) {
    std::fprintf(stderr, "check failed: %s\n", e.what());
    return 3;
  } catch (const cnwf::ValidationError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return 1;
  } catch (const cnwf::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
