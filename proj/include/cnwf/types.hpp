/// @file types.hpp
/// @brief Shared Eigen aliases used across the library.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace cnwf {

using Vec   = Eigen::VectorXd;
using Vec2  = Eigen::Vector2d;
using Vec3  = Eigen::Vector3d;
using VecI  = Eigen::VectorXi;
using Mat   = Eigen::MatrixXd;
using Mat2  = Eigen::Matrix2d;
using SpMat = Eigen::SparseMatrix<double>;
using Trip  = Eigen::Triplet<double>;

// Cochains are plain coefficient vectors: 0-cochains live on vertices,
// 1-cochains on oriented edges (orientation stored with the mesh).
using Cochain0 = Vec;
using Cochain1 = Vec;

}  // namespace cnwf
