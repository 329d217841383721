/// @file forward_fem.hpp
/// @brief Ground-truth generation: stabilized fine-scale advection-diffusion
///        solves, bump sources, velocity fields, noisy sensor sampling, and
///        the rolling training cache.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/feec.hpp"
#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Picard stagnation; carries the last iterate for diagnostics.
struct PicardError : NumericalError {
  PicardError(const std::string& msg, Cochain0 iterate)
      : NumericalError(msg), last_iterate(std::move(iterate)) {}
  Cochain0 last_iterate;
};

/// One fine-scale transport problem: -(1/Pe) lap(u) + v . grad(u) = f with
/// Dirichlet data on tagged boundary vertices. Edges listed in
/// `neumann_edges` carry zero-flux (natural) conditions instead; a boundary
/// vertex is Dirichlet unless every boundary edge touching it is Neumann.
struct ProblemInstance {
  double peclet = 1.0;
  Mat velocity;          ///< n0 x 2 nodal velocity, max row norm 1 (or 0)
  Cochain0 source;       ///< nonnegative nodal source
  Cochain0 dirichlet_values;  ///< full-length; read only at Dirichlet vertices
  std::vector<int> neumann_edges;  ///< boundary edge ids with zero flux
};

struct Observation {
  Vec2 position;
  double u = 0.0;  ///< noisy field reading
  Vec2 v;          ///< noisy velocity reading
};

/// Unordered sensor bundle; consumers must be permutation invariant.
struct ObservationSet {
  std::vector<Observation> sensors;
  double peclet = 1.0;
};

struct SampleTriple {
  ObservationSet observation;
  Cochain0 field;   ///< solves the forward problem for (source, velocity, Pe)
  Cochain0 source;  ///< unit integral
  Mat velocity;     ///< the instance's nodal velocity (n0 x 2)
};

struct SampleCache {
  int capacity = 0;
  int refresh_count = 0;
  std::vector<SampleTriple> samples;
};

/// How per-sample velocity fields are produced.
enum class VelocityMode {
  kAngle,   ///< uniform unit vector at an angle drawn from [angle_min, angle_max)
  kFixed,   ///< a fixed nodal field (stream-function derived or file loaded)
};

struct DatasetConfig {
  int n_sensors = 5;
  double noise_std_u = 0.02;  ///< fraction of max|u|
  double noise_std_v = 0.02;  ///< absolute (velocity is unit normalized)
  int capacity = 1600;
  int refresh_count = 16;
  double bump_radius = 0.07;
  double exclusion = 0.12;  ///< boundary clearance of the valid region
  double peclet_min = 1e3;
  double peclet_max = 1e3;
  VelocityMode velocity_mode = VelocityMode::kAngle;
  double angle_min = 0.0;
  double angle_max = 6.283185307179586;
  Mat fixed_velocity;  ///< used when velocity_mode == kFixed
  int max_retries = 5;
};

/// Uniform unit velocity at the given angle, one row per vertex.
Mat uniform_velocity(const TriMesh& mesh, double angle);

/// Divergence-free field v = (d(psi)/dy, -d(psi)/dx) from nodal stream
/// function values, with per-vertex area-weighted gradient averaging.
Mat velocity_from_stream(const TriMesh& mesh, const Vec& psi);

/// Read `n_vertices` lines of "vx vy" matching mesh vertex order.
Mat load_velocity_field(const std::string& path, int n_vertices);

/// Scale so the largest row norm is exactly 1. Throws on a zero field.
void normalize_velocity(Mat& velocity);

/// Smooth compactly supported bump centered at `center`:
/// exp(-d^2 / (r^2 - d^2)) for d < r, 0 otherwise. Equals 1 at the center
/// and vanishes with all derivatives at distance r.
Cochain0 bump_source(const Vec2& center, double r, const TriMesh& mesh);

/// Dirichlet vertex ids of an instance (boundary minus pure-Neumann corners).
std::vector<int> dirichlet_vertices(const TriMesh& mesh,
                                    const ProblemInstance& inst);

/// Streamline-upwind stabilized P1 solve of the instance. The discrete
/// residual is verified to 1e-10 of the right-hand side norm.
Cochain0 solve_advection_diffusion(const TriMesh& mesh, const FineComplex& fine,
                                   const ProblemInstance& inst);

/// Picard fixed point of the state-dependent advection
///   v(u) = 0 where u <= threshold, v0 * gain * u above,
/// damped and iterated to 1e-8 relative change. Throws NumericalError on
/// stagnation (message carries the final relative change).
Cochain0 solve_nonlinear_advection(const TriMesh& mesh, const FineComplex& fine,
                                   const ProblemInstance& inst,
                                   double threshold, double gain);

/// P1-interpolated field and velocity readings at the sensor positions with
/// independent Gaussian noise (u noise scaled by max|u|). Deterministic for
/// a fixed seed.
ObservationSet sample_observations(const Cochain0& u,
                                   const ProblemInstance& inst,
                                   const TriMesh& mesh, const Mat& positions,
                                   double noise_std_u, double noise_std_v,
                                   std::uint64_t seed);

/// Fresh cache of `config.capacity` independently drawn samples.
SampleCache generate_dataset(const TriMesh& mesh, const FineComplex& fine,
                             const DatasetConfig& config, std::uint64_t seed);

/// Replace exactly `cache.refresh_count` distinct uniformly chosen entries
/// with freshly solved samples.
void refresh_cache(SampleCache& cache, const TriMesh& mesh,
                   const FineComplex& fine, const DatasetConfig& config,
                   std::uint64_t step_seed);

/// Forward-solve compatibility of a predicted source density:
/// ||u(pred) - u(true)||_L2 / ||u(true)||_L2, both sources normalized to
/// unit integral before solving.
double consistency_error(const Cochain0& predicted_density,
                         const ProblemInstance& inst_true, const TriMesh& mesh,
                         const FineComplex& fine);

/// Persist one binary file per sample plus a JSON manifest (mesh hash, seed,
/// config echo) in `dir`. `load_sample_cache` verifies the mesh hash.
void save_sample_cache(const SampleCache& cache, const std::string& dir,
                       const TriMesh& mesh, const DatasetConfig& config,
                       std::uint64_t seed);
SampleCache load_sample_cache(const std::string& dir, const TriMesh& mesh);

}  // namespace cnwf
