/// @file testutil.hpp
/// @brief Shared fixtures for the test suite.
#pragma once

#include <string>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf::testutil {

/// Unit right triangle (0,0), (1,0), (0,1).
inline TriMesh single_triangle() {
  Mat v(3, 2);
  v << 0, 0, 1, 0, 0, 1;
  Eigen::Matrix<int, Eigen::Dynamic, 3> t(1, 3);
  t << 0, 1, 2;
  return build_mesh(v, t);
}

/// Unit square split along the diagonal.
inline TriMesh two_triangle_square() {
  Mat v(4, 2);
  v << 0, 0, 1, 0, 1, 1, 0, 1;
  Eigen::Matrix<int, Eigen::Dynamic, 3> t(2, 3);
  t << 0, 1, 2, 0, 2, 3;
  return build_mesh(v, t);
}

/// U-shaped nonconvex domain: [0,3]x[0,2] minus the slot
/// (1.25, 1.75) x (0.8, 2.0]. Geodesics between the arm tips must go around
/// the slot bottom.
inline TriMesh u_domain(double h) {
  return generate_rect_mesh(0.0, 0.0, 3.0, 2.0, h, [](double x, double y) {
    return !(x > 1.25 && x < 1.75 && y > 0.8);
  });
}

/// Random interior perturbation of a mesh's non-boundary vertices; keeps all
/// triangles valid by construction (magnitude well below the edge length).
template <typename RngT>
inline TriMesh jiggle_interior(const TriMesh& mesh, RngT& rng, double scale) {
  Mat v = mesh.vertices;
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    if (mesh.vertex_on_boundary[i]) continue;
    v(i, 0) += scale * (rng.uniform() - 0.5);
    v(i, 1) += scale * (rng.uniform() - 0.5);
  }
  return build_mesh(v, mesh.triangles, mesh.dirichlet_list());
}

}  // namespace cnwf::testutil
