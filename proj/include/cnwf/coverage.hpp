/// @file coverage.hpp
/// @brief Coverage energies over geodesic Voronoi partitions, the discrete
///        Lloyd descent, the adaptive density-driven placement loop with its
///        descent-theorem monitors, and the bump-importance contraction
///        experiment.
///
/// The coverage energy of sensors X under a nonnegative density rho is
///   J(X, rho) = sum_i  int_{V_i} rho(q) d(q, x_i)^2 dq,
/// evaluated by mass-lumped vertex quadrature over the vertex-sampled
/// geodesic Voronoi assignment. Lloyd rounds move each sensor a fraction
/// alpha along the geodesic toward its cell centroid, which preserves
/// feasibility on nonconvex domains.
#pragma once

#include <functional>
#include <vector>

#include "cnwf/feec.hpp"
#include "cnwf/geodesy.hpp"
#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// J(X, rho) with one row of X per sensor. `rho` is any nonnegative nodal
/// field (unit integral not required; energies scale linearly).
double coverage_energy(const Mat& X, const Vec& rho, const TriMesh& mesh,
                       DistanceMode mode);

struct CentroidResult {
  Vec2 point;
  double mass = 0;
  bool zero_mass = false;  ///< cell mass under the floor; generator returned
  bool projected = false;  ///< Euclidean centroid left the cell; snapped to
                           ///< the nearest cell vertex
};

/// Mass centroid of one Voronoi cell. A centroid that lands outside the
/// cell's vertex region (possible on nonconvex cells) is replaced by the
/// nearest cell vertex so the target is always reachable inside the domain.
CentroidResult cell_centroid(const VoronoiPartition& part, int cell_id,
                             const Vec& rho, const TriMesh& mesh,
                             const Vec2& generator);

struct LloydResult {
  Mat X;                         ///< final positions
  std::vector<double> energies;  ///< J before round 1, then after each round
  std::vector<Mat> trajectory;   ///< positions after each round
  int zero_mass_events = 0;
  int projections = 0;
};

/// `m` rounds of: Voronoi assignment, per-cell centroids, and relaxed
/// movement along the geodesic path (fraction alpha of its length).
LloydResult discrete_lloyd(const Mat& X, const Vec& rho, const TriMesh& mesh,
                           DistanceMode mode, int m, double alpha);

/// Computable over-estimate N * |Omega| * diam^2 of the geometry constant in
/// the density-perturbation descent bound; diam is the maximal pairwise
/// geodesic distance over (subsampled) boundary vertices.
double c_omega_bound(const TriMesh& mesh, DistanceMode mode, int N);

struct TheoremVerdict {
  bool applicable = false;  ///< premise held, so the conclusion is asserted
  bool conclusion = false;  ///< combined-step energy actually decreased
};

/// Descent-theorem monitor: if the density moved less than
/// -dJ_lloyd / c_omega in the sup norm, the energy of the combined
/// (placement + density) step must have decreased.
TheoremVerdict theorem1_monitor(double dJ_lloyd, double rho_change_inf,
                                double c_omega, double J_before,
                                double J_after);

struct SafeguardResult {
  Vec rho;
  double alpha_b = 0;  ///< retention weight on the old density
};

/// Convex blend rho_{k+1} = a*rho_k + (1-a)*rho_new with the smallest
/// a in [0,1] (bisection, tolerance 1e-3) keeping the sup-norm change
/// strictly inside the admissible budget -dJ_lloyd / c_omega. A zero budget
/// returns the old density (a = 1).
SafeguardResult safeguarded_density_update(const Vec& rho_k,
                                           const Vec& rho_new,
                                           double dJ_lloyd, double c_omega);

struct CoverageRecord {
  int k = 0;
  Mat X;                  ///< positions entering iteration k
  double J_model = 0;     ///< energy under the working density, before Lloyd
  double J_true = 0;      ///< energy under rho_true, before Lloyd
  double J_model_after = 0;
  double dJ_lloyd = 0;    ///< J_model_after - J_model (same density)
  double rho_change_inf = 0;  ///< sup-norm density change entering this k
  double c_omega = 0;
  double sinkhorn_err = 0;  ///< divergence of the working density to rho_true
  bool model_updated = false;
  bool degenerate_fallback = false;
  bool premise1 = false;     ///< descent-theorem premise at this iteration
  bool conclusion1 = false;  ///< J_model(k) < J_model(k-1) when premise held
  std::vector<Mat> inner_trajectory;     ///< positions after each Lloyd round
  std::vector<double> inner_energies;    ///< J before round 1, then per round
};

struct ModelDensity {
  Vec rho;
  bool degenerate = false;
};

/// Density oracle for the adaptive loop: positions and iteration in, nodal
/// density out (typically a trained conditional model behind observations).
using DensityModel = std::function<ModelDensity(const Mat& X, int k)>;

struct AdaptiveConfig {
  int K = 20;
  int inner_m = 2;
  double alpha = 0.5;
  std::vector<int> schedule;  ///< iterations that refresh the density
  bool safeguard = false;     ///< blend refreshed densities admissibly
  DistanceMode mode = DistanceMode::kEuclidean;
  double sinkhorn_eps_scale = 1e-3;  ///< times squared domain diameter
  int sinkhorn_max_iter = 5000;
};

struct AdaptiveResult {
  std::vector<CoverageRecord> records;
  Mat X_final;
  Vec rho_final;
};

/// Two-scale loop: the density refreshes on scheduled iterations (uniform
/// until the first refresh), Lloyd rounds move the sensors every iteration,
/// and each record carries both energies, the density change, the transport
/// error to the reference density, and the descent-theorem verdict.
AdaptiveResult adaptive_loop(const Mat& X0, const DensityModel& model,
                             const Vec& rho_true, const TriMesh& mesh,
                             const FineComplex& fine,
                             const AdaptiveConfig& cfg);

/// Importance field for the contraction experiment: a smooth compactly
/// supported bump of scale r_prime * m (m = distance of the nearest sensor
/// to x_star) centered at x_star over a constant background beta.
struct BumpImportanceModel {
  Vec2 x_star = Vec2::Zero();
  double r_prime = 0.5;  ///< support radius as a fraction of m, in (0, 1)
  double beta = 1e-4;    ///< background level before normalization
  /// Sector-condition constant of the radially symmetric profile: every
  /// angular sector of width theta holds at least alpha_sec * theta of the
  /// bump's mass.
  double alpha_sec = 1.0 / 6.283185307179586;
};

/// Vertex-sampled unit-integral density: scaled bump inside the disk of
/// radius r_prime * m about x_star, beta outside, renormalized. m = 0
/// degenerates to a single-vertex point mass at x_star.
Vec bump_importance(const BumpImportanceModel& model, const Mat& X,
                    const TriMesh& mesh, const FineComplex& fine);

/// Largest background level for which the single-sensor centroid condition
/// ||c - x_star|| <= r_target * m holds on a validation grid of sensor
/// offsets; writes it into model.beta and returns it.
double calibrate_background(BumpImportanceModel& model, const TriMesh& mesh,
                            const FineComplex& fine, double r_target);

struct Theorem4Result {
  Vec times;
  Vec m_trace;             ///< minimal sensor distance to x_star over time
  double fitted_rate = 0;  ///< least-squares slope of log m(t)
  double r_estimate = 0;   ///< measured centroid contraction factor
  double bound_factor = 0; ///< m(T) / (m(0) * exp(alpha (r-1) T))
  bool bound_ok = false;   ///< bound_factor <= 1.05
};

/// Explicit-Euler integration of x_i' = -alpha (x_i - c_i) with the bump
/// importance recomputed every step on the convex disk. Throws
/// NumericalError when the distance trace fails to decrease monotonically.
Theorem4Result theorem4_experiment(const TriMesh& mesh,
                                   const FineComplex& fine, const Mat& X0,
                                   const BumpImportanceModel& model,
                                   double alpha, double T, double dt);

struct ObservabilityMetrics {
  double u_obs_mean = 0;  ///< mean absolute field reading over the sensors
  double j_true = 0;      ///< coverage energy under the reference density
};

ObservabilityMetrics observability_metrics(const Vec& u_true, const Mat& X,
                                           const Vec& rho_true,
                                           const TriMesh& mesh,
                                           DistanceMode mode);

}  // namespace cnwf
