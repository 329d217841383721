#include "cnwf/reduced_rom.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>

#include "cnwf/quadrature.hpp"

namespace cnwf {

void validate_reduction_map(const ReductionMap& red, const TriMesh& mesh,
                            double tol) {
  const int n0c = static_cast<int>(red.W.rows());
  const int n0f = static_cast<int>(red.W.cols());
  if (n0c < 1 || n0f != mesh.n_vertices())
    throw ValidationError("reduction map: W is " + std::to_string(n0c) + " x " +
                          std::to_string(n0f) + " but the mesh has " +
                          std::to_string(mesh.n_vertices()) + " vertices");
  if (red.boundary_row < 0 || red.boundary_row >= n0c)
    throw ValidationError("reduction map: boundary row out of range");

  double worst = 0;
  int worst_col = -1;
  for (int i = 0; i < n0f; ++i) {
    const double dev = std::abs(red.W.col(i).sum() - 1.0);
    if (dev > worst) {
      worst = dev;
      worst_col = i;
    }
  }
  if (worst > tol)
    throw ValidationError(
        "reduction map: partition of unity violated at fine node " +
        std::to_string(worst_col) + ", column sum off by " +
        std::to_string(worst));
  if (red.W.minCoeff() < -tol)
    throw ValidationError("reduction map: negative weight " +
                          std::to_string(red.W.minCoeff()));
  for (int i = 0; i < n0f; ++i) {
    const double want = mesh.vertex_dirichlet[i] ? 1.0 : 0.0;
    if (std::abs(red.W(red.boundary_row, i) - want) > tol)
      throw ValidationError(
          "reduction map: boundary row is not the Dirichlet indicator at "
          "fine node " +
          std::to_string(i));
  }
}

int coarse_edge_index(int i, int j, int n0c) {
  if (i >= j || i < 0 || j >= n0c)
    throw ValidationError("coarse_edge_index: need 0 <= i < j < n0c");
  return i * n0c - i * (i + 1) / 2 + (j - i - 1);
}

std::pair<int, int> coarse_edge_pair(int e, int n0c) {
  if (e < 0 || e >= coarse_edge_count(n0c))
    throw ValidationError("coarse_edge_pair: edge index out of range");
  for (int i = 0; i < n0c; ++i) {
    const int row = n0c - i - 1;  // edges starting at i
    if (e < row) return {i, i + 1 + e};
    e -= row;
  }
  throw ValidationError("coarse_edge_pair: unreachable");
}

CoarseComplex build_coarse_complex(const TriMesh& mesh,
                                   const FineComplex& fine,
                                   const ReductionMap& red, int quad_order) {
  validate_reduction_map(red, mesh);
  const int n0c = static_cast<int>(red.W.rows());
  const int n1c = coarse_edge_count(n0c);

  CoarseComplex cc;
  cc.n0c = n0c;
  cc.boundary_row = red.boundary_row;
  cc.M0c = red.W * (fine.M0 * red.W.transpose());
  cc.M0c = 0.5 * (cc.M0c + cc.M0c.transpose().eval());  // kill roundoff skew

  cc.d0c = Mat::Zero(n1c, n0c);
  for (int e = 0; e < n1c; ++e) {
    const auto [i, j] = coarse_edge_pair(e, n0c);
    cc.d0c(e, i) = 1.0;
    cc.d0c(e, j) = -1.0;
  }

  cc.M1c = Mat::Zero(n1c, n1c);
  if (n1c == 0) return cc;
  const QuadratureRule q = triangle_quadrature(quad_order);
  Mat Wt(n0c, 3);        // partition weights at the triangle's vertices
  Mat grads(n0c, 2);     // grad(psi) restricted to the triangle
  Mat basis(n1c, 2);     // coarse 1-form values at one quadrature point
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    for (int lv = 0; lv < 3; ++lv) Wt.col(lv) = red.W.col(mesh.triangles(t, lv));
    Mat G(3, 2);
    for (int lv = 0; lv < 3; ++lv) G.row(lv) = mesh.tri_grad.row(3 * t + lv);
    grads = Wt * G;
    for (int k = 0; k < q.size(); ++k) {
      const Vec psi = Wt * q.bary.row(k).transpose();
      for (int e = 0; e < n1c; ++e) {
        const auto [i, j] = coarse_edge_pair(e, n0c);
        basis.row(e) = psi[j] * grads.row(i) - psi[i] * grads.row(j);
      }
      cc.M1c.noalias() += (q.w[k] * mesh.tri_area[t]) * basis * basis.transpose();
    }
  }
  cc.M1c = 0.5 * (cc.M1c + cc.M1c.transpose().eval());
  return cc;
}

FluxFunction zero_flux(int n1c) {
  FluxFunction f;
  f.eval = [n1c](const Vec& u) {
    (void)u;
    return Vec::Zero(n1c).eval();
  };
  f.jacobian = [n1c](const Vec& u) {
    return Mat::Zero(n1c, u.size()).eval();
  };
  return f;
}

namespace {

void check_dims(const Vec& u_hat, const Vec& f_hat, double eps,
                const CoarseComplex& cc) {
  if (u_hat.size() != cc.n0c || f_hat.size() != cc.n0c)
    throw ValidationError("reduced system: expected vectors of length " +
                          std::to_string(cc.n0c));
  if (!(eps > 0))
    throw ValidationError("reduced system: diffusivity must be positive");
}

}  // namespace

Vec reduced_residual(const Vec& u_hat, const Vec& f_hat, double eps,
                     const FluxFunction& flux, const CoarseComplex& cc,
                     double g_b) {
  check_dims(u_hat, f_hat, eps, cc);
  const Vec du = cc.d0c * u_hat;
  const Vec n = flux.eval(u_hat);
  if (n.size() != cc.d0c.rows())
    throw ValidationError("reduced system: flux returned wrong length");
  Vec h = cc.d0c.transpose() * (cc.M1c * (eps * du + n)) - cc.M0c * f_hat;
  h[cc.boundary_row] = u_hat[cc.boundary_row] - g_b;
  return h;
}

Mat reduced_jacobian(const Vec& u_hat, double eps, const FluxFunction& flux,
                     const CoarseComplex& cc) {
  const Mat dn = flux.jacobian(u_hat);
  if (dn.rows() != cc.d0c.rows() || dn.cols() != cc.n0c)
    throw ValidationError("reduced system: flux Jacobian has wrong shape");
  Mat j = cc.d0c.transpose() * cc.M1c * (eps * cc.d0c + dn);
  j.row(cc.boundary_row).setZero();
  j(cc.boundary_row, cc.boundary_row) = 1.0;
  return j;
}

NewtonResult solve_reduced(const CoarseComplex& cc, double eps,
                           const FluxFunction& flux, const Vec& f_hat,
                           double g_b, int max_iter, double tol) {
  NewtonResult out;
  out.u_hat = Vec::Zero(cc.n0c);
  Vec h = reduced_residual(out.u_hat, f_hat, eps, flux, cc, g_b);
  double hn = h.norm();
  out.residual_history.push_back(hn);

  for (int it = 0; it < max_iter; ++it) {
    if (hn <= tol) {
      out.converged = true;
      out.iterations = it;
      return out;
    }
    Mat j = reduced_jacobian(out.u_hat, eps, flux, cc);
    Eigen::FullPivLU<Mat> lu(j);
    Vec step;
    if (lu.isInvertible()) {
      step = lu.solve(-h);
    } else {
      // Levenberg shift: smallest power-of-ten multiple of the matrix scale
      // that restores invertibility.
      const double scale = std::max(j.cwiseAbs().maxCoeff(), 1e-30);
      double mu = 1e-12 * scale;
      bool ok = false;
      for (int k = 0; k < 12 && !ok; ++k, mu *= 10.0) {
        Eigen::FullPivLU<Mat> shifted(j + mu * Mat::Identity(cc.n0c, cc.n0c));
        if (shifted.isInvertible()) {
          step = shifted.solve(-h);
          ok = true;
        }
      }
      if (!ok)
        throw NewtonError("solve_reduced: Jacobian singular beyond repair",
                          out.u_hat, out.residual_history);
    }

    // Backtracking on the residual norm, at most 8 halvings.
    double lambda = 1.0;
    bool accepted = false;
    Vec u_try, h_try;
    double hn_try = 0;
    for (int ls = 0; ls <= 8; ++ls) {
      u_try = out.u_hat + lambda * step;
      h_try = reduced_residual(u_try, f_hat, eps, flux, cc, g_b);
      hn_try = h_try.norm();
      if (std::isfinite(hn_try) && hn_try < (1.0 - 1e-4 * lambda) * hn) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) {
      // Regularized retry: a Levenberg shift shortens and bends the step
      // toward steepest descent.
      const double scale = std::max(j.cwiseAbs().maxCoeff(), 1e-30);
      double mu = 1e-6 * scale;
      for (int k = 0; k < 10 && !accepted; ++k, mu *= 10.0) {
        Eigen::FullPivLU<Mat> shifted(j + mu * Mat::Identity(cc.n0c, cc.n0c));
        if (!shifted.isInvertible()) continue;
        u_try = out.u_hat + shifted.solve(-h);
        h_try = reduced_residual(u_try, f_hat, eps, flux, cc, g_b);
        hn_try = h_try.norm();
        if (std::isfinite(hn_try) && hn_try < hn) accepted = true;
      }
    }
    if (!accepted)
      throw NewtonError(
          "solve_reduced: no descent after line search and shift retries, "
          "residual " +
              std::to_string(hn),
          out.u_hat, out.residual_history);
    out.u_hat = u_try;
    h = h_try;
    hn = hn_try;
    out.residual_history.push_back(hn);
  }

  if (hn <= tol) {
    out.converged = true;
    out.iterations = max_iter;
    return out;
  }
  throw NewtonError("solve_reduced: residual " + std::to_string(hn) +
                        " after " + std::to_string(max_iter) + " iterations",
                    out.u_hat, out.residual_history);
}

Vec pullback(const ReductionMap& red, const Vec& coarse) {
  if (coarse.size() != red.W.rows())
    throw ValidationError("pullback: expected length " +
                          std::to_string(red.W.rows()));
  return red.W.transpose() * coarse;
}

}  // namespace cnwf
