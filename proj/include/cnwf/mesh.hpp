/// @file mesh.hpp
/// @brief Conforming triangle meshes in the plane: generation, text-format
///        I/O, validation, adjacency, and point location.
///
/// Conventions baked into every consumer of TriMesh:
///  - triangles are counter-clockwise (positive signed area);
///  - edges are stored oriented tail -> head with tail index < head index;
///  - per-triangle edge ids follow the local vertex pairs (0,1), (0,2), (1,2).
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cnwf/types.hpp"

namespace cnwf {

struct TriMesh {
  Mat vertices;                                   // n0 x 2
  Eigen::Matrix<int, Eigen::Dynamic, 3> triangles;  // nt x 3, CCW
  Eigen::Matrix<int, Eigen::Dynamic, 2> edges;      // ne x 2, (tail, head)
  Eigen::Matrix<int, Eigen::Dynamic, 3> tri_edges;  // edge id per local pair

  std::vector<std::uint8_t> vertex_on_boundary;   // topological boundary
  std::vector<std::uint8_t> edge_on_boundary;     // edge with one triangle
  std::vector<std::uint8_t> vertex_dirichlet;     // Dirichlet tag set

  // Derived geometry, filled by finalize().
  Vec tri_area;                    // positive areas
  Mat tri_grad;                    // (3*nt) x 2, P1 basis gradients
  Eigen::Matrix<int, Eigen::Dynamic, 2> edge_tris;  // incident tris, -1 pad
  std::vector<std::vector<int>> vertex_tris;        // vertex -> triangles
  double h_max = 0.0;              // longest edge
  double h_min = 0.0;              // shortest edge

  int n_vertices() const { return static_cast<int>(vertices.rows()); }
  int n_triangles() const { return static_cast<int>(triangles.rows()); }
  int n_edges() const { return static_cast<int>(edges.rows()); }
  double area() const { return tri_area.sum(); }

  Vec2 vertex(int i) const { return vertices.row(i).transpose(); }
  /// Gradient of the P1 basis function of local vertex `lv` on triangle `t`.
  Vec2 grad(int t, int lv) const { return tri_grad.row(3 * t + lv).transpose(); }

  std::vector<int> dirichlet_list() const;
  std::vector<int> boundary_list() const;

  // Point-location acceleration grid.
  struct Grid {
    double x0 = 0, y0 = 0, cell = 1;
    int nx = 0, ny = 0;
    std::vector<std::vector<int>> bins;
  };
  Grid grid;
};

struct PointLocation {
  int tri = -1;
  Vec3 bary = Vec3::Zero();
  bool inside = false;
};

/// Build a mesh from raw arrays: orient triangles CCW, derive edges,
/// adjacency, boundary flags, and validate manifoldness and areas.
/// `dirichlet` empty means "all topological boundary vertices".
TriMesh build_mesh(Mat vertices, Eigen::Matrix<int, Eigen::Dynamic, 3> triangles,
                   const std::vector<int>& dirichlet = {});

/// Structured disk mesh: rings of 6k vertices around a center vertex.
/// Boundary vertices lie on the circle exactly; max edge <= 1.5 * target_h.
TriMesh generate_disk_mesh(double radius, double target_h,
                           int max_elements = 2000000);

/// Structured axis-aligned rectangle mesh ([x0,x1] x [y0,y1]) with the option
/// to carve out triangles whose centroid a predicate rejects (used for
/// nonconvex test domains). Right-triangle split, never obtuse.
TriMesh generate_rect_mesh(double x0, double y0, double x1, double y1,
                           double target_h,
                           const std::function<bool(double, double)>& keep = {});

/// Text format:  "NV NT" header, NV lines "x y", NT lines "i j k",
/// optional trailing lines "b v_index" tagging Dirichlet vertices.
TriMesh load_mesh(const std::string& path);
void save_mesh(const TriMesh& mesh, const std::string& path);

/// Locate the triangle containing p (ties resolved to the lowest triangle
/// id). `inside == false` means p is outside the triangulation.
PointLocation locate_point(const TriMesh& mesh, const Vec2& p);

/// Value of the P1 interpolant of nodal values at a located point.
double interpolate(const TriMesh& mesh, const Vec& nodal,
                   const PointLocation& loc);

/// Nearest mesh vertex to p (Euclidean).
int nearest_vertex(const TriMesh& mesh, const Vec2& p);

/// Distance from every vertex to the topological boundary, by fast marching
/// seeded at boundary vertices. Zero on the boundary, positive inside.
Vec boundary_distance_field(const TriMesh& mesh);

/// Content hash over vertex coordinates and triangle connectivity (FNV-1a).
/// Stable across runs for bitwise-identical meshes.
std::uint64_t mesh_hash(const TriMesh& mesh);

}  // namespace cnwf
