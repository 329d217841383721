/// @file fast_marching.hpp
/// @brief First-order fast-marching eikonal solver |grad d| = 1 on planar
///        triangulations. Obtuse update stencils are repaired by recursive
///        splitting through adjacent triangles (the planar analogue of
///        unfolding); splitting never crosses boundary edges, so nonconvex
///        domains cannot be shortcut through holes.
#pragma once

#include <utility>
#include <vector>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Distances from seeded vertices. Seeds carry initial values (usually 0, or
/// an exact local distance when seeding a triangle around an interior point).
Vec fast_marching(const TriMesh& mesh,
                  const std::vector<std::pair<int, double>>& seeds);

}  // namespace cnwf
