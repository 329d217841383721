/// @file transport.hpp
/// @brief Entropic-regularized squared 2-Wasserstein divergence between
///        discrete measures, plus an exact small-instance oracle.
///
/// The reported value is the debiased divergence
///   S(mu, nu) = OT_eps(mu, nu) - OT_eps(mu, mu)/2 - OT_eps(nu, nu)/2,
/// where OT_eps is the dual objective <f, mu> + <g, nu> at the Sinkhorn
/// fixed point. Debiasing makes S(mu, mu) = 0 and keeps S nonnegative for
/// squared-distance costs, which the raw entropic cost does not satisfy.
#pragma once

#include <vector>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Weighted point set. `nodes` optionally maps support rows back to mesh
/// vertex ids (empty when the support is arbitrary).
struct DiscreteMeasure {
  Mat support;             ///< k x 2 point coordinates
  Vec weights;             ///< nonnegative, sums to 1
  std::vector<int> nodes;  ///< optional mesh vertex ids, size k or 0
};

/// Nodal density -> measure with weights proportional to lumped mass times
/// density. Entries with normalized weight <= threshold are dropped and the
/// rest renormalized; pass threshold = 0 to keep the full support.
DiscreteMeasure measure_from_density(const TriMesh& mesh, const Vec& density,
                                     double threshold = 1e-12);

/// Pairwise squared Euclidean distances, rows indexed by X, columns by Y.
Mat squared_cost_matrix(const Mat& X, const Mat& Y);

/// Squared mesh-geodesic distances (fast-marching field per row point).
/// The self variant symmetrizes, giving a zero diagonal.
Mat squared_geodesic_cost_matrix(const TriMesh& mesh, const Mat& X,
                                 const Mat& Y);
Mat squared_geodesic_cost_matrix(const TriMesh& mesh, const Mat& X);

struct SinkhornResult {
  double value = 0;        ///< debiased divergence (length squared)
  bool converged = false;  ///< all three solves hit the marginal tolerance
  double marginal_error = 0;  ///< worst final marginal violation
  int iterations = 0;         ///< largest iteration count of the solves
  Vec f, g;      ///< dual potentials of the cross problem
  Vec p_mu, p_nu;  ///< symmetric potentials of the two self problems
};

/// Debiased Sinkhorn divergence with squared Euclidean cost built from the
/// supports. Marginal tolerance 1e-9; a non-converged result is returned
/// with `converged == false` and the final violation.
SinkhornResult sinkhorn_w2sq(const DiscreteMeasure& mu,
                             const DiscreteMeasure& nu, double eps,
                             int max_iter = 20000);

/// Same with caller-provided cost blocks (e.g. geodesic costs).
SinkhornResult sinkhorn_w2sq(const DiscreteMeasure& mu,
                             const DiscreteMeasure& nu, const Mat& cost_mn,
                             const Mat& cost_mm, const Mat& cost_nn, double eps,
                             int max_iter = 20000);

/// Exact optimal transport cost by the transportation simplex (Bland's rule,
/// guaranteed termination). Supports are capped at 12 points per side.
double exact_w2sq_small(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

/// Exact cost with an explicit cost matrix (same size cap).
double exact_w2sq_small(const Vec& mu_weights, const Vec& nu_weights,
                        const Mat& cost);

}  // namespace cnwf
