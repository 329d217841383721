/// @file runconfig.hpp
/// @brief Experiment configuration: a sectioned key-value file (TOML-style)
///        with command-line overrides, canonical JSON echo, and a stable hash
///        for reproducibility manifests.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnwf/conditional_model.hpp"
#include "cnwf/forward_fem.hpp"
#include "cnwf/mesh.hpp"

namespace cnwf {

struct RunConfig {
  // [mesh]
  std::string mesh_kind = "disk";  ///< disk | rect | file
  double mesh_radius = 1.0;
  double mesh_h = 0.05;
  double rect_x0 = 0, rect_y0 = 0, rect_x1 = 1, rect_y1 = 1;
  bool hole = false;  ///< carve an axis-aligned block out of the rectangle
  double hole_x0 = 0, hole_y0 = 0, hole_x1 = 0, hole_y1 = 0;
  std::string mesh_file;

  // [physics]
  double peclet_min = 1e3, peclet_max = 1e3;
  std::string velocity_mode = "angle";  ///< angle | fixed
  double angle_min = 0.0, angle_max = 6.283185307179586;
  double fixed_vx = 1.0, fixed_vy = 0.0;
  double bump_radius = 0.07;
  double exclusion = 0.12;

  // [sensors]
  int n_sensors = 5;
  double noise_u = 0.02, noise_v = 0.02;

  // [dataset]
  int capacity = 1600;
  int refresh_count = 16;
  std::string dataset_dir = "dataset";

  // [model]
  ModelConfig model;

  // [train]
  int steps = 2000;
  int batch = 64;
  int checkpoint_every = 500;
  int refresh_every = 0;  ///< 0 disables cache refreshes during training
  std::string baseline = "none";  ///< none | mlp | encoder
  int baseline_width = 128;
  int baseline_depth = 3;

  // [eval]
  int eval_samples = 32;
  int sweep_min = 3, sweep_max = 12;
  bool sweep = false;

  // [coverage]
  int cov_K = 20;
  int cov_m = 2;
  double cov_alpha = 0.5;
  std::vector<int> schedule = {5, 11, 17};
  int trials = 20;
  bool safeguard = false;
  std::string distance_mode = "euclidean";  ///< euclidean | fmm
  double r_prime = 0.5;
  double r_target = 0.5;
  double horizon = 1.2;     ///< contraction-experiment time span
  double x_star_x = 0.2, x_star_y = -0.1;

  // [run]
  std::uint64_t seed = 0;
  std::string out_dir = "out";
};

/// Parse the config file (empty path = defaults) and apply
/// "section.key=value" overrides in order. Unknown keys are rejected.
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

/// Canonical JSON echo of every field, used in manifests and for hashing.
std::string run_config_json(const RunConfig& cfg);

/// FNV-1a hash of the canonical JSON.
std::uint64_t run_config_hash(const RunConfig& cfg);

/// Output directory with the optional CNWF_OUT_ROOT environment prefix
/// applied to relative paths.
std::string resolve_out_dir(const RunConfig& cfg);

/// Build or load the mesh the config describes.
TriMesh make_mesh(const RunConfig& cfg);

/// Dataset generation settings assembled from the config sections.
DatasetConfig make_dataset_config(const RunConfig& cfg);

}  // namespace cnwf
