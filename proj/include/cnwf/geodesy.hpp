/// @file geodesy.hpp
/// @brief Geodesic distance fields, Voronoi partitions, and shortest paths on
///        planar triangulations.
///
/// Distances come from either exact Euclidean evaluation (valid on convex
/// domains, where geodesics are straight) or the fast-marching eikonal solver
/// (general domains). Off-vertex queries interpolate the P1 field.
#pragma once

#include <vector>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

enum class DistanceMode { kEuclidean, kFastMarching };

struct DistanceField {
  Vec d;            // per-vertex distances, >= 0 (+inf if unreachable)
  Vec2 source;      // query point the field is measured from
};

/// Distance field from an interior or boundary point. Fast marching is seeded
/// with exact Euclidean values on the vertices of the containing triangle.
DistanceField distance_field(const TriMesh& mesh, const Vec2& source);

/// Per-vertex distances from p under the chosen metric backend.
Vec distances_from(const TriMesh& mesh, const Vec2& p, DistanceMode mode);

/// P1 interpolation of a distance field at an arbitrary point inside the mesh.
double distance_at(const TriMesh& mesh, const DistanceField& field, const Vec2& p);

struct VoronoiPartition {
  VecI cell;                      // per-vertex generator index
  Mat dist;                       // N x n_vertices distances
  std::vector<std::uint8_t> tie;  // near-equidistant vertices (lowest index won)
};

/// Vertex-sampled Voronoi partition for N generator points.
/// Ties are broken toward the lowest generator index and flagged.
VoronoiPartition geodesic_voronoi(const TriMesh& mesh, const Mat& generators,
                                  DistanceMode mode);

struct GeodesicPath {
  Mat points;   // k x 2 polyline from a to b
  Vec arclen;   // cumulative arc length, arclen[0] = 0
  double length = 0.0;
  bool dijkstra_fallback = false;  // descent failed; edge-graph path returned
};

/// Approximate shortest path from a to b: steepest descent on the distance
/// field of b with step <= h/2, with an edge-graph Dijkstra fallback.
GeodesicPath shortest_path(const TriMesh& mesh, const Vec2& a, const Vec2& b,
                           DistanceMode mode);

/// Point at arc length s along the path; s is clamped to [0, length].
Vec2 point_along_path(const GeodesicPath& path, double s);

}  // namespace cnwf
