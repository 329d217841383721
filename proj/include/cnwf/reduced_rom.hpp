/// @file reduced_rom.hpp
/// @brief Coarse Whitney complex built from a partition-of-unity weight
///        matrix, and the reduced nonlinear conservation solve.
///
/// A weight matrix W (n0c x n0f, nonnegative, columns summing to 1) defines
/// coarse scalar functions psi_i = sum_k W_ik phi_k over the fine P1 basis.
/// Coarse 1-form basis functions live on the complete graph over partitions:
///   w1_ij = psi_j grad(psi_i) - psi_i grad(psi_j),  one per pair i < j.
/// The reduced conservation system for a scalar field u with diffusivity eps,
/// edge flux N and source f reads
///   H(u) = eps * d0c^T M1c d0c u + d0c^T M1c N(u) - M0c f = 0,
/// with one designated partition row pinned to the Dirichlet value.
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/feec.hpp"
#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Partition-of-unity reduction from n0f fine nodes to n0c coarse regions.
struct ReductionMap {
  Mat W;                 ///< n0c x n0f, entries >= 0, columns sum to 1
  int boundary_row = 0;  ///< row pinned to the Dirichlet boundary partition
};

/// Throws ValidationError (naming the worst column) if W is not a partition
/// of unity within `tol`, has negative entries, or the boundary row is not
/// exactly the indicator of the mesh's Dirichlet vertex set.
void validate_reduction_map(const ReductionMap& red, const TriMesh& mesh,
                            double tol = 1e-10);

/// Number of coarse edges: all unordered pairs of partitions.
inline int coarse_edge_count(int n0c) { return n0c * (n0c - 1) / 2; }

/// Lexicographic index of pair (i, j), i < j, among all pairs.
int coarse_edge_index(int i, int j, int n0c);
std::pair<int, int> coarse_edge_pair(int e, int n0c);

/// Galerkin-reduced mass matrices and incidence on the partition graph.
struct CoarseComplex {
  Mat M0c;          ///< n0c x n0c, = W M0f W^T
  Mat M1c;          ///< n1c x n1c, coarse 1-form Gram matrix
  Mat d0c;          ///< n1c x n0c, +1 on the lower pair index, -1 on the upper
  int n0c = 0;
  int boundary_row = 0;  ///< copied from the reduction map
};

/// Assemble the coarse complex. M1c is integrated triangle by triangle with
/// the given quadrature order (the integrand is piecewise quadratic, so any
/// order >= 2 is exact; 4 is the default used throughout).
CoarseComplex build_coarse_complex(const TriMesh& mesh,
                                   const FineComplex& fine,
                                   const ReductionMap& red,
                                   int quad_order = 4);

/// Coarse-edge nonlinearity with its Jacobian (n1c values, n1c x n0c
/// derivative). Both callbacks must be set.
struct FluxFunction {
  std::function<Vec(const Vec&)> eval;
  std::function<Mat(const Vec&)> jacobian;
};

/// The identically-zero flux on n1c edges.
FluxFunction zero_flux(int n1c);

/// Conservation residual H(u); the boundary partition row is replaced by the
/// Dirichlet constraint u_b - g_b.
Vec reduced_residual(const Vec& u_hat, const Vec& f_hat, double eps,
                     const FluxFunction& flux, const CoarseComplex& cc,
                     double g_b = 0.0);

/// Analytic Jacobian of reduced_residual with the same row replacement.
Mat reduced_jacobian(const Vec& u_hat, double eps, const FluxFunction& flux,
                     const CoarseComplex& cc);

/// Newton failure: carries the last iterate and the residual-norm history.
class NewtonError : public NumericalError {
 public:
  NewtonError(const std::string& msg, Vec iterate, std::vector<double> history)
      : NumericalError(msg),
        last_iterate(std::move(iterate)),
        residual_history(std::move(history)) {}
  Vec last_iterate;
  std::vector<double> residual_history;
};

struct NewtonResult {
  Vec u_hat;
  bool converged = false;
  int iterations = 0;
  std::vector<double> residual_history;  ///< ||H|| before each step + final
};

/// Damped Newton on the reduced system from u = 0: backtracking line search
/// (up to 8 halvings), a Levenberg shift retry when the Jacobian is singular
/// or the search stalls, and failure past `max_iter` throws NewtonError.
NewtonResult solve_reduced(const CoarseComplex& cc, double eps,
                           const FluxFunction& flux, const Vec& f_hat,
                           double g_b = 0.0, int max_iter = 30,
                           double tol = 1e-8);

/// Fine-node coefficients of a coarse cochain: W^T applied to it.
Vec pullback(const ReductionMap& red, const Vec& coarse);

}  // namespace cnwf
