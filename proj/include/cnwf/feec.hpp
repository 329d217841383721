/// @file feec.hpp
/// @brief Fine-complex assembly: P1 (0-form) and lowest-order edge (1-form)
///        mass matrices, the signed vertex->edge incidence operator, and the
///        P1 stiffness matrix.
///
/// The edge basis function attached to stored edge e = (tail, head) is
///   w_e = phi_tail * grad(phi_head) - phi_head * grad(phi_tail),
/// so all operators follow the mesh's stored edge orientation. With the
/// canonical tail < head orientation this makes
///   D0^T * M1 * D0 == K
/// hold exactly (up to roundoff) for any triangulation: discrete gradients of
/// vertex data expand exactly in the edge basis.
#pragma once

#include <string>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Assembled fine-scale operators, immutable once built.
struct FineComplex {
  SpMat M0;    ///< n0 x n0 nodal mass, SPD
  SpMat M1;    ///< n1 x n1 edge mass, SPD
  SpMat D0;    ///< n1 x n0 signed incidence, rows sum to zero
  SpMat K;     ///< n0 x n0 stiffness; equals D0^T M1 D0
  Vec lumped;  ///< lumped nodal masses (row sums of M0)
};

/// Assemble all fine-scale operators for a mesh.
FineComplex build_fine_complex(const TriMesh& mesh);

/// P1 nodal mass matrix, SPD, exact (per-triangle A/12 * (1 + delta_ij)).
SpMat assemble_mass0(const TriMesh& mesh);

/// Edge (Whitney lowest-order) mass matrix, SPD. Entries are integrals of
/// degree-2 polynomials, integrated exactly with an order-2 rule.
SpMat assemble_mass1(const TriMesh& mesh);

/// Signed incidence: (D0 a)_e = a_head - a_tail. Rows sum to zero.
SpMat coboundary0(const TriMesh& mesh);

/// P1 stiffness matrix (Dirichlet energy), SPD on the complement of constants.
SpMat assemble_stiffness_p1(const TriMesh& mesh);

/// Lumped 0-form masses: row sums of M0 (positive, sums to the domain area).
Vec lumped_mass0(const TriMesh& mesh);

/// Integral of a P1 nodal field: 1^T M0 f computed via lumped masses (exact
/// for P1 since M0's row sums are the lumped masses).
double integrate_p1(const TriMesh& mesh, const Vec& nodal);

/// Plain-text coordinate dump ("row col value" per nonzero) for inspection.
void dump_matrix_coordinate(const SpMat& m, const std::string& path);

}  // namespace cnwf
