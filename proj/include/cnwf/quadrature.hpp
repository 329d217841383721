/// @file quadrature.hpp
/// @brief Symmetric Gauss rules on the reference triangle, orders 1 to 4.
///        Points are stored as barycentric coordinates; weights sum to 1 and
///        are applied as w * |T|.
#pragma once

#include "cnwf/errors.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

struct QuadratureRule {
  Mat bary;  // nq x 3 barycentric coordinates
  Vec w;     // nq weights, sum = 1

  int size() const { return static_cast<int>(w.size()); }
};

/// Rule exact for polynomials of total degree <= order on a triangle.
inline QuadratureRule triangle_quadrature(int order) {
  QuadratureRule q;
  switch (order) {
    case 1: {
      q.bary.resize(1, 3);
      q.bary << 1.0 / 3, 1.0 / 3, 1.0 / 3;
      q.w.resize(1);
      q.w << 1.0;
      break;
    }
    case 2: {
      q.bary.resize(3, 3);
      q.bary << 2.0 / 3, 1.0 / 6, 1.0 / 6,
                1.0 / 6, 2.0 / 3, 1.0 / 6,
                1.0 / 6, 1.0 / 6, 2.0 / 3;
      q.w.resize(3);
      q.w << 1.0 / 3, 1.0 / 3, 1.0 / 3;
      break;
    }
    case 3: {
      // 4-point rule with a negative centroid weight.
      q.bary.resize(4, 3);
      q.bary << 1.0 / 3, 1.0 / 3, 1.0 / 3,
                0.6, 0.2, 0.2,
                0.2, 0.6, 0.2,
                0.2, 0.2, 0.6;
      q.w.resize(4);
      q.w << -27.0 / 48, 25.0 / 48, 25.0 / 48, 25.0 / 48;
      break;
    }
    case 4: {
      // Dunavant degree-4 rule, 6 points, all weights positive.
      const double a1 = 0.445948490915965, w1 = 0.223381589678011;
      const double a2 = 0.091576213509771, w2 = 0.109951743655322;
      q.bary.resize(6, 3);
      q.bary << a1, a1, 1 - 2 * a1,
                a1, 1 - 2 * a1, a1,
                1 - 2 * a1, a1, a1,
                a2, a2, 1 - 2 * a2,
                a2, 1 - 2 * a2, a2,
                1 - 2 * a2, a2, a2;
      q.w.resize(6);
      q.w << w1, w1, w1, w2, w2, w2;
      break;
    }
    default:
      throw ValidationError("triangle_quadrature: unsupported order " +
                            std::to_string(order));
  }
  return q;
}

}  // namespace cnwf
