#include "cnwf/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/feec.hpp"
#include "cnwf/geodesy.hpp"

namespace cnwf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMarginalTol = 1e-9;

Vec safe_log(const Vec& w) {
  Vec l(w.size());
  for (int i = 0; i < w.size(); ++i) l[i] = w[i] > 0 ? std::log(w[i]) : -kInf;
  return l;
}

/// Dual pairing that skips zero-weight atoms (their potentials are gauge).
double dual_dot(const Vec& pot, const Vec& w) {
  double s = 0;
  for (int i = 0; i < w.size(); ++i)
    if (w[i] > 0) s += pot[i] * w[i];
  return s;
}

struct OtResult {
  Vec f, g;
  double value = 0;
  bool converged = false;
  double marginal_error = kInf;
  int iterations = 0;
};

/// Scaling-form Sinkhorn with absorbed potentials; valid when the kernel
/// exp(-C/eps) has no flushed-to-zero entries (max(C)/eps <= 500). The
/// absorbed rewrite keeps the exact log-domain fixed point.
OtResult sinkhorn_kernel(const Vec& a, const Vec& b, const Mat& C, double eps,
                         int max_iter) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  Vec fa = Vec::Zero(n), gb = Vec::Zero(m);
  Vec u = Vec::Ones(n), v = Vec::Ones(m);
  Mat K(n, m);
  auto rebuild = [&]() {
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < n; ++i)
        K(i, j) = std::exp(std::min((fa[i] + gb[j] - C(i, j)) / eps, 700.0));
  };
  rebuild();

  OtResult r;
  for (int it = 0;; ++it) {
    const Vec s = K.transpose() * a.cwiseProduct(u);
    double err = 0;
    for (int j = 0; j < m; ++j)
      if (b[j] > 0) err = std::max(err, b[j] * std::abs(v[j] * s[j] - 1.0));
    r.marginal_error = err;
    r.iterations = it;
    if (it > 0 && err <= kMarginalTol) {
      r.converged = true;
      break;
    }
    if (it >= max_iter) break;
    for (int j = 0; j < m; ++j) v[j] = s[j] > 0 ? 1.0 / s[j] : 1.0;
    const Vec t = K * b.cwiseProduct(v);
    for (int i = 0; i < n; ++i) u[i] = t[i] > 0 ? 1.0 / t[i] : 1.0;
    const bool blown = !u.allFinite() || !v.allFinite() ||
                       u.maxCoeff() > 1e100 || v.maxCoeff() > 1e100 ||
                       u.minCoeff() < 1e-100 || v.minCoeff() < 1e-100;
    if (blown) {
      for (int i = 0; i < n; ++i) {
        fa[i] += eps * std::log(std::max(u[i], 1e-300));
        u[i] = 1.0;
      }
      for (int j = 0; j < m; ++j) {
        gb[j] += eps * std::log(std::max(v[j], 1e-300));
        v[j] = 1.0;
      }
      rebuild();
    }
  }
  r.f = fa;
  r.g = gb;
  for (int i = 0; i < n; ++i) r.f[i] += eps * std::log(u[i]);
  for (int j = 0; j < m; ++j) r.g[j] += eps * std::log(v[j]);
  r.value = dual_dot(r.f, a) + dual_dot(r.g, b);
  return r;
}

/// Strict log-sum-exp Sinkhorn for severely scaled costs (max(C)/eps > 500).
OtResult sinkhorn_log(const Vec& a, const Vec& b, const Mat& C, double eps,
                      int max_iter) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  const Vec loga = safe_log(a), logb = safe_log(b);
  Vec f = Vec::Zero(n), g = Vec::Zero(m);

  auto lse_col = [&](int j) {
    double best = -kInf;
    for (int i = 0; i < n; ++i)
      best = std::max(best, (f[i] - C(i, j)) / eps + loga[i]);
    if (best == -kInf) return -kInf;
    double s = 0;
    for (int i = 0; i < n; ++i)
      s += std::exp((f[i] - C(i, j)) / eps + loga[i] - best);
    return best + std::log(s);
  };
  auto lse_row = [&](int i) {
    double best = -kInf;
    for (int j = 0; j < m; ++j)
      best = std::max(best, (g[j] - C(i, j)) / eps + logb[j]);
    if (best == -kInf) return -kInf;
    double s = 0;
    for (int j = 0; j < m; ++j)
      s += std::exp((g[j] - C(i, j)) / eps + logb[j] - best);
    return best + std::log(s);
  };

  OtResult r;
  for (int it = 0;; ++it) {
    double err = 0;
    for (int j = 0; j < m; ++j)
      if (b[j] > 0)
        err = std::max(err,
                       b[j] * std::abs(std::exp(g[j] / eps + lse_col(j)) - 1.0));
    r.marginal_error = err;
    r.iterations = it;
    if (it > 0 && err <= kMarginalTol) {
      r.converged = true;
      break;
    }
    if (it >= max_iter) break;
    for (int j = 0; j < m; ++j)
      if (b[j] > 0) g[j] = -eps * lse_col(j);
    for (int i = 0; i < n; ++i)
      if (a[i] > 0) f[i] = -eps * lse_row(i);
  }
  r.f = f;
  r.g = g;
  r.value = dual_dot(f, a) + dual_dot(g, b);
  return r;
}

OtResult sinkhorn_cross(const Vec& a, const Vec& b, const Mat& C, double eps,
                        int max_iter) {
  const double scale = C.size() ? C.maxCoeff() : 0.0;
  if (scale / eps <= 500.0) return sinkhorn_kernel(a, b, C, eps, max_iter);
  return sinkhorn_log(a, b, C, eps, max_iter);
}

/// Symmetric fixed point for the self term OT_eps(mu, mu): a single
/// potential p with half-step averaging. Returns value 2 <p, a>.
OtResult sinkhorn_self(const Vec& a, const Mat& C, double eps, int max_iter) {
  const int n = static_cast<int>(a.size());
  const Vec loga = safe_log(a);
  const double scale = C.size() ? C.maxCoeff() : 0.0;
  OtResult r;

  if (scale / eps <= 500.0) {
    Vec pa = Vec::Zero(n);
    Vec w = Vec::Ones(n);
    Mat K(n, n);
    auto rebuild = [&]() {
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          K(i, j) = std::exp(std::min((pa[i] + pa[j] - C(i, j)) / eps, 700.0));
    };
    rebuild();
    for (int it = 0;; ++it) {
      const Vec t = K * a.cwiseProduct(w);
      double err = 0;
      for (int i = 0; i < n; ++i)
        if (a[i] > 0) err = std::max(err, a[i] * std::abs(w[i] * t[i] - 1.0));
      r.marginal_error = err;
      r.iterations = it;
      if (it > 0 && err <= kMarginalTol) {
        r.converged = true;
        break;
      }
      if (it >= max_iter) break;
      for (int i = 0; i < n; ++i)
        w[i] = t[i] > 0 ? std::sqrt(w[i] / t[i]) : 1.0;
      if (!w.allFinite() || w.maxCoeff() > 1e50 || w.minCoeff() < 1e-50) {
        for (int i = 0; i < n; ++i) {
          pa[i] += eps * std::log(std::max(w[i], 1e-300));
          w[i] = 1.0;
        }
        rebuild();
      }
    }
    r.f = pa;
    for (int i = 0; i < n; ++i) r.f[i] += eps * std::log(w[i]);
  } else {
    Vec p = Vec::Zero(n);
    auto lse_row = [&](int i) {
      double best = -kInf;
      for (int j = 0; j < n; ++j)
        best = std::max(best, (p[j] - C(i, j)) / eps + loga[j]);
      if (best == -kInf) return -kInf;
      double s = 0;
      for (int j = 0; j < n; ++j)
        s += std::exp((p[j] - C(i, j)) / eps + loga[j] - best);
      return best + std::log(s);
    };
    for (int it = 0;; ++it) {
      Vec q(n);
      double err = 0;
      for (int i = 0; i < n; ++i) {
        q[i] = a[i] > 0 ? -eps * lse_row(i) : p[i];
        if (a[i] > 0)
          err = std::max(err, a[i] * std::abs(std::exp((p[i] - q[i]) / eps) - 1.0));
      }
      r.marginal_error = err;
      r.iterations = it;
      if (it > 0 && err <= kMarginalTol) {
        r.converged = true;
        break;
      }
      if (it >= max_iter) break;
      p = 0.5 * (p + q);
    }
    r.f = p;
  }
  r.g = r.f;
  r.value = 2.0 * dual_dot(r.f, a);
  return r;
}

void validate_measure(const DiscreteMeasure& mu, const char* which) {
  if (mu.support.rows() != mu.weights.size())
    throw ValidationError(std::string("sinkhorn_w2sq: ") + which +
                          " support/weight size mismatch");
  if (mu.weights.size() == 0)
    throw ValidationError(std::string("sinkhorn_w2sq: ") + which +
                          " is empty");
  if (mu.weights.minCoeff() < 0)
    throw ValidationError(std::string("sinkhorn_w2sq: ") + which +
                          " has negative weights");
  if (std::abs(mu.weights.sum() - 1.0) > 1e-9)
    throw ValidationError(std::string("sinkhorn_w2sq: ") + which +
                          " weights do not sum to 1");
}

}  // namespace

DiscreteMeasure measure_from_density(const TriMesh& mesh, const Vec& density,
                                     double threshold) {
  if (density.size() != mesh.n_vertices())
    throw ValidationError("measure_from_density: density size mismatch");
  const Vec lumped = lumped_mass0(mesh);
  Vec w = lumped.cwiseProduct(density);
  const double neg_floor = -1e-12 * (1.0 + w.cwiseAbs().maxCoeff());
  for (int i = 0; i < w.size(); ++i) {
    if (w[i] < neg_floor)
      throw ValidationError("measure_from_density: negative density");
    w[i] = std::max(w[i], 0.0);
  }
  const double total = w.sum();
  if (total <= 0)
    throw ValidationError("measure_from_density: density has no mass");
  w /= total;

  std::vector<int> keep;
  for (int i = 0; i < w.size(); ++i)
    if (w[i] > threshold) keep.push_back(i);
  if (keep.empty())
    throw ValidationError("measure_from_density: truncation removed all mass");
  DiscreteMeasure m;
  m.support.resize(static_cast<int>(keep.size()), 2);
  m.weights.resize(static_cast<int>(keep.size()));
  m.nodes = keep;
  double kept = 0;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    m.support.row(static_cast<int>(k)) = mesh.vertices.row(keep[k]);
    m.weights[static_cast<int>(k)] = w[keep[k]];
    kept += w[keep[k]];
  }
  m.weights /= kept;
  return m;
}

Mat squared_cost_matrix(const Mat& X, const Mat& Y) {
  Mat C(X.rows(), Y.rows());
  for (int j = 0; j < Y.rows(); ++j)
    for (int i = 0; i < X.rows(); ++i)
      C(i, j) = (X.row(i) - Y.row(j)).squaredNorm();
  return C;
}

Mat squared_geodesic_cost_matrix(const TriMesh& mesh, const Mat& X,
                                 const Mat& Y) {
  Mat C(X.rows(), Y.rows());
  for (int i = 0; i < X.rows(); ++i) {
    const DistanceField f = distance_field(mesh, X.row(i).transpose());
    for (int j = 0; j < Y.rows(); ++j) {
      const double d = distance_at(mesh, f, Y.row(j).transpose());
      C(i, j) = d * d;
    }
  }
  return C;
}

Mat squared_geodesic_cost_matrix(const TriMesh& mesh, const Mat& X) {
  Mat C = squared_geodesic_cost_matrix(mesh, X, X);
  C = 0.5 * (C + C.transpose()).eval();
  C.diagonal().setZero();
  return C;
}

SinkhornResult sinkhorn_w2sq(const DiscreteMeasure& mu,
                             const DiscreteMeasure& nu, const Mat& cost_mn,
                             const Mat& cost_mm, const Mat& cost_nn, double eps,
                             int max_iter) {
  validate_measure(mu, "mu");
  validate_measure(nu, "nu");
  if (eps <= 0) throw ValidationError("sinkhorn_w2sq: eps must be positive");
  if (cost_mn.rows() != mu.weights.size() ||
      cost_mn.cols() != nu.weights.size())
    throw ValidationError("sinkhorn_w2sq: cross cost size mismatch");

  const OtResult cross =
      sinkhorn_cross(mu.weights, nu.weights, cost_mn, eps, max_iter);
  const OtResult self_mu = sinkhorn_self(mu.weights, cost_mm, eps, max_iter);
  const OtResult self_nu = sinkhorn_self(nu.weights, cost_nn, eps, max_iter);

  SinkhornResult r;
  r.value = cross.value - 0.5 * self_mu.value - 0.5 * self_nu.value;
  r.converged = cross.converged && self_mu.converged && self_nu.converged;
  r.marginal_error = std::max({cross.marginal_error, self_mu.marginal_error,
                               self_nu.marginal_error});
  r.iterations =
      std::max({cross.iterations, self_mu.iterations, self_nu.iterations});
  r.f = cross.f;
  r.g = cross.g;
  r.p_mu = self_mu.f;
  r.p_nu = self_nu.f;
  return r;
}

SinkhornResult sinkhorn_w2sq(const DiscreteMeasure& mu,
                             const DiscreteMeasure& nu, double eps,
                             int max_iter) {
  return sinkhorn_w2sq(mu, nu, squared_cost_matrix(mu.support, nu.support),
                       squared_cost_matrix(mu.support, mu.support),
                       squared_cost_matrix(nu.support, nu.support), eps,
                       max_iter);
}

double exact_w2sq_small(const Vec& mu_weights, const Vec& nu_weights,
                        const Mat& cost) {
  const int n = static_cast<int>(mu_weights.size());
  const int m = static_cast<int>(nu_weights.size());
  if (n > 12 || m > 12)
    throw ValidationError("exact_w2sq_small: support size exceeds 12");
  if (n == 0 || m == 0)
    throw ValidationError("exact_w2sq_small: empty measure");
  if (cost.rows() != n || cost.cols() != m)
    throw ValidationError("exact_w2sq_small: cost size mismatch");
  Vec a = mu_weights, b = nu_weights;
  const double sa = a.sum(), sb = b.sum();
  if (sa <= 0 || sb <= 0 || std::abs(sa - sb) > 1e-9)
    throw ValidationError("exact_w2sq_small: unbalanced measures");
  a /= sa;
  b /= sb;

  // Transportation simplex. Basis cells form a spanning tree of the
  // bipartite row/column graph; Bland's rule guarantees termination.
  Mat x = Mat::Zero(n, m);
  std::vector<std::vector<char>> basic(n, std::vector<char>(m, 0));
  {
    Vec ra = a, rb = b;
    int i = 0, j = 0;
    while (true) {
      const double q = std::min(ra[i], rb[j]);
      x(i, j) = q;
      basic[i][j] = 1;
      ra[i] -= q;
      rb[j] -= q;
      if (i == n - 1 && j == m - 1) break;
      if (j == m - 1) ++i;
      else if (i == n - 1) ++j;
      else if (ra[i] <= 1e-15) ++i;
      else ++j;
    }
  }

  const int max_pivots = 20000;
  for (int pivot = 0; pivot < max_pivots; ++pivot) {
    // Duals from the basis tree: u_0 = 0.
    Vec u = Vec::Constant(n, kInf), v = Vec::Constant(m, kInf);
    u[0] = 0;
    for (int sweep = 0; sweep < n + m; ++sweep) {
      bool changed = false;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          if (!basic[i][j]) continue;
          if (u[i] != kInf && v[j] == kInf) {
            v[j] = cost(i, j) - u[i];
            changed = true;
          } else if (v[j] != kInf && u[i] == kInf) {
            u[i] = cost(i, j) - v[j];
            changed = true;
          }
        }
      if (!changed) break;
    }

    // Entering cell: lowest row-major index with negative reduced cost.
    int ei = -1, ej = -1;
    for (int i = 0; i < n && ei < 0; ++i)
      for (int j = 0; j < m; ++j) {
        if (basic[i][j]) continue;
        if (cost(i, j) - u[i] - v[j] < -1e-12) {
          ei = i;
          ej = j;
          break;
        }
      }
    if (ei < 0) break;  // optimal

    // Unique tree path from row ei to column ej; DFS over basis edges.
    // Nodes: rows 0..n-1, columns n..n+m-1.
    const int nn = n + m;
    std::vector<int> parent(nn, -2);
    std::vector<int> stack = {ei};
    parent[ei] = -1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      if (node == n + ej) break;
      if (node < n) {
        for (int j = 0; j < m; ++j)
          if (basic[node][j] && parent[n + j] == -2) {
            parent[n + j] = node;
            stack.push_back(n + j);
          }
      } else {
        const int j = node - n;
        for (int i = 0; i < n; ++i)
          if (basic[i][j] && parent[i] == -2) {
            parent[i] = node;
            stack.push_back(i);
          }
      }
    }
    if (parent[n + ej] == -2)
      throw NumericalError("exact_w2sq_small: basis lost tree connectivity");

    // Cycle = entering edge + tree path; positions alternate +//-.
    std::vector<std::pair<int, int>> path;  // cells along the tree path
    int node = n + ej;
    while (parent[node] != -1) {
      const int p = parent[node];
      if (node < n)
        path.emplace_back(node, p - n);
      else
        path.emplace_back(p, node - n);
      node = p;
    }
    // Walking from the entering edge (+), path cells alternate -, +, -, ...
    double theta = kInf;
    int li = -1, lj = -1;
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const auto [i, j] = path[k];
      if (x(i, j) < theta - 1e-18 ||
          (std::abs(x(i, j) - theta) <= 1e-18 &&
           (li < 0 || i < li || (i == li && j < lj)))) {
        theta = x(i, j);
        li = i;
        lj = j;
      }
    }
    if (li < 0)
      throw NumericalError("exact_w2sq_small: degenerate pivot cycle");

    x(ei, ej) += theta;
    basic[ei][ej] = 1;
    for (std::size_t k = 0; k < path.size(); ++k) {
      const auto [i, j] = path[k];
      x(i, j) += (k % 2 == 0) ? -theta : theta;
    }
    basic[li][lj] = 0;
    x(li, lj) = 0;
  }

  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) total += x(i, j) * cost(i, j);
  return total;
}

double exact_w2sq_small(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  return exact_w2sq_small(mu.weights, nu.weights,
                          squared_cost_matrix(mu.support, nu.support));
}

}  // namespace cnwf
