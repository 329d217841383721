#include "cnwf/coverage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "cnwf/errors.hpp"
#include "cnwf/transport.hpp"

namespace cnwf {

namespace {

constexpr double kMassFloor = 1e-14;

void check_positions(const Mat& X, const TriMesh& mesh, const char* who) {
  if (X.rows() < 1 || X.cols() != 2)
    throw ValidationError(std::string(who) + ": need an N x 2 position matrix with N >= 1");
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    if (!locate_point(mesh, X.row(i).transpose()).inside)
      throw ValidationError(std::string(who) + ": sensor " + std::to_string(i) +
                            " lies outside the domain");
}

void check_density(const Vec& rho, const TriMesh& mesh, const char* who) {
  if (rho.size() != mesh.n_vertices())
    throw ValidationError(std::string(who) + ": density size does not match the mesh");
  if (rho.minCoeff() < -1e-12)
    throw ValidationError(std::string(who) + ": density has negative entries");
}

double partition_energy(const VoronoiPartition& part, const Vec& rho,
                        const Vec& lumped) {
  double J = 0;
  for (Eigen::Index v = 0; v < rho.size(); ++v) {
    const double d = part.dist(part.cell[v], v);
    J += lumped[v] * std::max(rho[v], 0.0) * d * d;
  }
  return J;
}

CentroidResult centroid_impl(const VoronoiPartition& part, int cell_id,
                             const Vec& rho, const Vec& lumped,
                             const TriMesh& mesh, const Vec2& generator) {
  CentroidResult out;
  out.point = generator;
  Vec2 acc = Vec2::Zero();
  double mass = 0;
  for (Eigen::Index v = 0; v < rho.size(); ++v) {
    if (part.cell[v] != cell_id) continue;
    const double w = lumped[v] * std::max(rho[v], 0.0);
    mass += w;
    acc += w * mesh.vertices.row(v).transpose();
  }
  if (mass <= kMassFloor) {
    out.zero_mass = true;
    return out;
  }
  out.mass = mass;
  Vec2 c = acc / mass;
  bool in_cell = false;
  if (locate_point(mesh, c).inside) {
    const int nv = nearest_vertex(mesh, c);
    in_cell = (part.cell[nv] == cell_id);
  }
  if (!in_cell) {
    // Nonconvex cells can push the Euclidean centroid outside; snap to the
    // cell vertex nearest to it so the target stays reachable.
    out.projected = true;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < rho.size(); ++v) {
      if (part.cell[v] != cell_id) continue;
      const double d = (mesh.vertices.row(v).transpose() - c).norm();
      if (d < best) {
        best = d;
        out.point = mesh.vertices.row(v).transpose();
      }
    }
    return out;
  }
  out.point = c;
  return out;
}

/// Move one sensor a fraction alpha along the geodesic toward its target,
/// falling back to the last on-path point that still lies inside the domain.
Vec2 relaxed_move(const TriMesh& mesh, const Vec2& x, const Vec2& target,
                  DistanceMode mode, double alpha) {
  if ((target - x).norm() < 1e-15) return x;
  const GeodesicPath path = shortest_path(mesh, x, target, mode);
  if (path.length <= 0) return x;
  const double s = alpha * path.length;
  Vec2 cand = point_along_path(path, s);
  if (locate_point(mesh, cand).inside) return cand;
  for (Eigen::Index r = path.points.rows() - 1; r >= 0; --r) {
    if (path.arclen[r] > s) continue;
    cand = path.points.row(r).transpose();
    if (locate_point(mesh, cand).inside) return cand;
  }
  return x;
}

/// Unit-integral smooth bump on the unit disk: c * exp(-r^2 / (1 - r^2)).
double bump_profile(double r2) {
  static const double c = [] {
    // 2 pi * int_0^1 exp(-r^2/(1-r^2)) r dr by composite Simpson.
    const int n = 1 << 13;
    const double h = 1.0 / n;
    auto f = [](double r) {
      const double d = 1.0 - r * r;
      if (d <= 1e-300) return 0.0;
      return std::exp(-r * r / d) * r;
    };
    double s = f(0.0) + f(1.0);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(i * h);
    return 1.0 / (2.0 * 3.141592653589793 * s * h / 3.0);
  }();
  if (r2 >= 1.0) return 0.0;
  return c * std::exp(-r2 / (1.0 - r2));
}

double min_distance_to(const Mat& X, const Vec2& p) {
  double m = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    m = std::min(m, (X.row(i).transpose() - p).norm());
  return m;
}

/// Density centroid over the whole domain (the single-sensor cell).
Vec2 global_centroid(const Vec& rho, const Vec& lumped, const TriMesh& mesh) {
  Vec2 acc = Vec2::Zero();
  double mass = 0;
  for (Eigen::Index v = 0; v < rho.size(); ++v) {
    const double w = lumped[v] * rho[v];
    mass += w;
    acc += w * mesh.vertices.row(v).transpose();
  }
  return acc / mass;
}

}  // namespace

double coverage_energy(const Mat& X, const Vec& rho, const TriMesh& mesh,
                       DistanceMode mode) {
  check_positions(X, mesh, "coverage_energy");
  check_density(rho, mesh, "coverage_energy");
  const VoronoiPartition part = geodesic_voronoi(mesh, X, mode);
  return partition_energy(part, rho, lumped_mass0(mesh));
}

CentroidResult cell_centroid(const VoronoiPartition& part, int cell_id,
                             const Vec& rho, const TriMesh& mesh,
                             const Vec2& generator) {
  check_density(rho, mesh, "cell_centroid");
  if (cell_id < 0 || cell_id >= part.dist.rows())
    throw ValidationError("cell_centroid: cell id out of range");
  return centroid_impl(part, cell_id, rho, lumped_mass0(mesh), mesh, generator);
}

LloydResult discrete_lloyd(const Mat& X, const Vec& rho, const TriMesh& mesh,
                           DistanceMode mode, int m, double alpha) {
  check_positions(X, mesh, "discrete_lloyd");
  check_density(rho, mesh, "discrete_lloyd");
  if (m < 0) throw ValidationError("discrete_lloyd: negative round count");
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ValidationError("discrete_lloyd: relaxation must lie in (0, 1]");

  const Vec lumped = lumped_mass0(mesh);
  LloydResult out;
  out.X = X;
  VoronoiPartition part = geodesic_voronoi(mesh, out.X, mode);
  out.energies.push_back(partition_energy(part, rho, lumped));
  for (int round = 0; round < m; ++round) {
    Mat Xn = out.X;
    for (Eigen::Index i = 0; i < out.X.rows(); ++i) {
      const Vec2 xi = out.X.row(i).transpose();
      const CentroidResult c =
          centroid_impl(part, static_cast<int>(i), rho, lumped, mesh, xi);
      if (c.zero_mass) {
        ++out.zero_mass_events;
        continue;
      }
      if (c.projected) ++out.projections;
      Xn.row(i) = relaxed_move(mesh, xi, c.point, mode, alpha).transpose();
    }
    out.X = Xn;
    part = geodesic_voronoi(mesh, out.X, mode);
    out.energies.push_back(partition_energy(part, rho, lumped));
    out.trajectory.push_back(out.X);
  }
  return out;
}

double c_omega_bound(const TriMesh& mesh, DistanceMode mode, int N) {
  if (N < 1) throw ValidationError("c_omega_bound: need N >= 1");
  std::vector<int> boundary = mesh.boundary_list();
  if (boundary.empty())
    throw ValidationError("c_omega_bound: mesh has no boundary vertices");
  constexpr std::size_t kMaxSamples = 64;
  if (boundary.size() > kMaxSamples) {
    std::vector<int> sub;
    const double stride = double(boundary.size()) / kMaxSamples;
    for (std::size_t i = 0; i < kMaxSamples; ++i)
      sub.push_back(boundary[static_cast<std::size_t>(i * stride)]);
    boundary = std::move(sub);
  }
  double diam = 0;
  if (mode == DistanceMode::kEuclidean) {
    for (std::size_t a = 0; a < boundary.size(); ++a)
      for (std::size_t b = a + 1; b < boundary.size(); ++b)
        diam = std::max(diam, (mesh.vertices.row(boundary[a]) -
                               mesh.vertices.row(boundary[b]))
                                  .norm());
  } else {
    for (std::size_t a = 0; a < boundary.size(); ++a) {
      const Vec d =
          distances_from(mesh, mesh.vertices.row(boundary[a]).transpose(), mode);
      for (std::size_t b = 0; b < boundary.size(); ++b)
        diam = std::max(diam, d[boundary[b]]);
    }
  }
  return N * mesh.area() * diam * diam;
}

TheoremVerdict theorem1_monitor(double dJ_lloyd, double rho_change_inf,
                                double c_omega, double J_before,
                                double J_after) {
  if (c_omega <= 0) throw ValidationError("theorem1_monitor: c_omega must be positive");
  TheoremVerdict v;
  v.applicable = (dJ_lloyd < 0) && (rho_change_inf < -dJ_lloyd / c_omega);
  v.conclusion = J_after < J_before;
  return v;
}

SafeguardResult safeguarded_density_update(const Vec& rho_k,
                                           const Vec& rho_new,
                                           double dJ_lloyd, double c_omega) {
  if (rho_k.size() != rho_new.size())
    throw ValidationError("safeguarded_density_update: density sizes differ");
  if (c_omega <= 0)
    throw ValidationError("safeguarded_density_update: c_omega must be positive");
  if (dJ_lloyd > 0)
    throw ValidationError(
        "safeguarded_density_update: Lloyd energy change must be <= 0");
  SafeguardResult out;
  const double budget = -dJ_lloyd / c_omega;
  const double D = (rho_new - rho_k).lpNorm<Eigen::Infinity>();
  if (budget <= 0) {
    out.alpha_b = 1.0;
    out.rho = rho_k;
    return out;
  }
  if (D < budget) {
    out.alpha_b = 0.0;
    out.rho = rho_new;
    return out;
  }
  double lo = 0.0, hi = 1.0;  // predicate (1-a) * D < budget is monotone in a
  while (hi - lo > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    ((1.0 - mid) * D < budget) ? hi = mid : lo = mid;
  }
  out.alpha_b = hi;
  out.rho = hi * rho_k + (1.0 - hi) * rho_new;
  return out;
}

AdaptiveResult adaptive_loop(const Mat& X0, const DensityModel& model,
                             const Vec& rho_true, const TriMesh& mesh,
                             const FineComplex& fine,
                             const AdaptiveConfig& cfg) {
  check_positions(X0, mesh, "adaptive_loop");
  check_density(rho_true, mesh, "adaptive_loop");
  if (std::abs(fine.lumped.dot(rho_true) - 1.0) > 1e-8)
    throw ValidationError("adaptive_loop: reference density must integrate to 1");
  if (cfg.K < 0) throw ValidationError("adaptive_loop: negative iteration count");

  AdaptiveResult result;
  const int n = mesh.n_vertices();
  const Vec uniform = Vec::Constant(n, 1.0 / mesh.area());
  Vec rho = uniform;
  Mat X = X0;
  if (cfg.K == 0) {
    result.X_final = X;
    result.rho_final = rho;
    return result;
  }

  const double c_om = c_omega_bound(mesh, cfg.mode, static_cast<int>(X0.rows()));
  // Transport scale from the boundary diameter baked into the c_omega bound.
  const double diam2 = c_om / (X0.rows() * mesh.area());
  const double eps_ot = cfg.sinkhorn_eps_scale * diam2;
  const DiscreteMeasure nu_true = measure_from_density(mesh, rho_true);

  for (int k = 0; k < cfg.K; ++k) {
    CoverageRecord rec;
    rec.k = k;
    rec.X = X;
    rec.c_omega = c_om;

    const bool update =
        std::find(cfg.schedule.begin(), cfg.schedule.end(), k) != cfg.schedule.end();
    if (update) {
      rec.model_updated = true;
      ModelDensity md = model(X, k);
      Vec cand;
      bool degenerate = md.degenerate || md.rho.size() != n ||
                        md.rho.minCoeff() < -1e-12;
      if (!degenerate) {
        const double mass = fine.lumped.dot(md.rho.cwiseMax(0.0));
        if (mass < 1e-12)
          degenerate = true;
        else
          cand = md.rho.cwiseMax(0.0) / mass;
      }
      if (degenerate) {
        rec.degenerate_fallback = true;
        cand = uniform;
      }
      Vec next;
      if (cfg.safeguard && !result.records.empty()) {
        const SafeguardResult sg = safeguarded_density_update(
            rho, cand, result.records.back().dJ_lloyd, c_om);
        next = sg.rho;
      } else {
        next = cand;
      }
      rec.rho_change_inf = (next - rho).lpNorm<Eigen::Infinity>();
      rho = next;
    }

    {
      const DiscreteMeasure mu = measure_from_density(mesh, rho);
      rec.sinkhorn_err =
          sinkhorn_w2sq(mu, nu_true, eps_ot, cfg.sinkhorn_max_iter).value;
    }
    rec.J_true = coverage_energy(X, rho_true, mesh, cfg.mode);

    const LloydResult lr =
        discrete_lloyd(X, rho, mesh, cfg.mode, cfg.inner_m, cfg.alpha);
    rec.J_model = lr.energies.front();
    rec.J_model_after = lr.energies.back();
    rec.dJ_lloyd = rec.J_model_after - rec.J_model;
    rec.inner_trajectory = lr.trajectory;
    rec.inner_energies = lr.energies;
    X = lr.X;

    if (!result.records.empty()) {
      const CoverageRecord& prev = result.records.back();
      const TheoremVerdict v = theorem1_monitor(
          prev.dJ_lloyd, rec.rho_change_inf, c_om, prev.J_model, rec.J_model);
      rec.premise1 = v.applicable;
      rec.conclusion1 = v.conclusion;
    }
    result.records.push_back(std::move(rec));
  }
  result.X_final = X;
  result.rho_final = rho;
  return result;
}

Vec bump_importance(const BumpImportanceModel& model, const Mat& X,
                    const TriMesh& mesh, const FineComplex& fine) {
  check_positions(X, mesh, "bump_importance");
  if (!(model.r_prime > 0.0 && model.r_prime < 1.0))
    throw ValidationError("bump_importance: scale fraction must lie in (0, 1)");
  if (model.beta < 0)
    throw ValidationError("bump_importance: background level must be >= 0");
  const int n = mesh.n_vertices();
  const double m = min_distance_to(X, model.x_star);
  Vec rho = Vec::Zero(n);
  if (m < 1e-12) {
    const int nv = nearest_vertex(mesh, model.x_star);
    rho[nv] = 1.0 / fine.lumped[nv];
    return rho;
  }
  const double s = model.r_prime * m;
  for (int v = 0; v < n; ++v) {
    const double d2 =
        (mesh.vertices.row(v).transpose() - model.x_star).squaredNorm();
    rho[v] = d2 < s * s ? bump_profile(d2 / (s * s)) / (s * s) : model.beta;
  }
  const double mass = fine.lumped.dot(rho);
  if (mass <= 0)
    throw NumericalError("bump_importance: density integrated to zero");
  return rho / mass;
}

double calibrate_background(BumpImportanceModel& model, const TriMesh& mesh,
                            const FineComplex& fine, double r_target) {
  if (!(r_target > 0.0 && r_target < 1.0))
    throw ValidationError("calibrate_background: target factor must lie in (0, 1)");
  const Vec lumped = lumped_mass0(mesh);
  struct Probe {
    Mat X;
    double m;
  };
  std::vector<Probe> probes;
  const double dirs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  for (double mv : {0.1, 0.2, 0.4}) {
    for (const auto& d : dirs) {
      Mat X(1, 2);
      X(0, 0) = model.x_star[0] + mv * d[0];
      X(0, 1) = model.x_star[1] + mv * d[1];
      if (locate_point(mesh, X.row(0).transpose()).inside)
        probes.push_back({X, mv});
    }
  }
  if (probes.empty())
    throw ValidationError("calibrate_background: no probe position lies inside");

  auto admissible = [&](double beta) {
    BumpImportanceModel trial = model;
    trial.beta = beta;
    for (const Probe& p : probes) {
      const Vec rho = bump_importance(trial, p.X, mesh, fine);
      const Vec2 c = global_centroid(rho, lumped, mesh);
      if ((c - model.x_star).norm() > r_target * p.m) return false;
    }
    return true;
  };

  if (!admissible(0.0))
    throw NumericalError(
        "calibrate_background: bump centroid misses the target even without "
        "background; refine the mesh");
  double lo = 0.0, hi = 1.0 / mesh.area();
  if (admissible(hi)) {
    lo = hi;
  } else {
    const double tol = 1e-3 * hi;
    while (hi - lo > tol) {
      const double mid = 0.5 * (lo + hi);
      admissible(mid) ? lo = mid : hi = mid;
    }
  }
  model.beta = std::max(lo, 1e-10);
  if (!admissible(model.beta)) model.beta = 1e-10;
  return model.beta;
}

Theorem4Result theorem4_experiment(const TriMesh& mesh,
                                   const FineComplex& fine, const Mat& X0,
                                   const BumpImportanceModel& model,
                                   double alpha, double T, double dt) {
  check_positions(X0, mesh, "theorem4_experiment");
  if (!(alpha > 0)) throw ValidationError("theorem4_experiment: alpha must be positive");
  if (!(dt > 0) || dt > 0.1 / alpha + 1e-12)
    throw ValidationError("theorem4_experiment: need 0 < dt <= 0.1 / alpha");
  if (!(T > 0)) throw ValidationError("theorem4_experiment: horizon must be positive");

  const Vec lumped = lumped_mass0(mesh);
  const int steps = std::max(1, static_cast<int>(std::lround(T / dt)));
  const double t_end = steps * dt;

  Theorem4Result out;
  out.times = Vec::LinSpaced(steps + 1, 0.0, t_end);
  out.m_trace = Vec::Zero(steps + 1);

  Mat X = X0;
  out.m_trace[0] = min_distance_to(X, model.x_star);
  const double m0 = out.m_trace[0];
  for (int s = 0; s < steps; ++s) {
    const Vec rho = bump_importance(model, X, mesh, fine);
    const VoronoiPartition part =
        geodesic_voronoi(mesh, X, DistanceMode::kEuclidean);
    Mat Xn = X;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const Vec2 xi = X.row(i).transpose();
      const CentroidResult c =
          centroid_impl(part, static_cast<int>(i), rho, lumped, mesh, xi);
      if (c.zero_mass) continue;
      Xn.row(i) += alpha * dt * (c.point - xi).transpose();
    }
    X = Xn;
    out.m_trace[s + 1] = min_distance_to(X, model.x_star);
    if (out.m_trace[s + 1] > out.m_trace[s] + 1e-12) {
      std::ostringstream msg;
      msg << "theorem4_experiment: distance trace increased at step " << s + 1
          << " (" << out.m_trace[s] << " -> " << out.m_trace[s + 1]
          << "); trace:";
      for (int j = 0; j <= s + 1; ++j) msg << ' ' << out.m_trace[j];
      throw NumericalError(msg.str());
    }
  }

  // Contraction factor of the single-sensor centroid map, probed by finite
  // offsets around the target.
  double r_est = 0;
  const double dirs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  for (double mv : {0.1, 0.2, 0.4}) {
    if (m0 > 0 && mv > 2.0 * m0) continue;
    for (const auto& d : dirs) {
      Mat Xp(1, 2);
      Xp(0, 0) = model.x_star[0] + mv * d[0];
      Xp(0, 1) = model.x_star[1] + mv * d[1];
      if (!locate_point(mesh, Xp.row(0).transpose()).inside) continue;
      const Vec rho = bump_importance(model, Xp, mesh, fine);
      const Vec2 c = global_centroid(rho, lumped, mesh);
      r_est = std::max(r_est, (c - model.x_star).norm() / mv);
    }
  }
  if (r_est >= 1.0)
    throw NumericalError(
        "theorem4_experiment: centroid map is not contractive on the probe grid");
  out.r_estimate = r_est;

  const double bound = m0 * std::exp(alpha * (r_est - 1.0) * t_end);
  const double m_final = out.m_trace[steps];
  out.bound_factor = bound > 0 ? m_final / bound : 0.0;
  out.bound_ok = m_final <= bound * 1.05 + 1e-12;

  // Least-squares slope of log m(t) over the usable part of the trace.
  double st = 0, sy = 0, stt = 0, sty = 0;
  int cnt = 0;
  const double floor = std::max(1e-12, 1e-6 * m0);
  for (int j = 0; j <= steps; ++j) {
    if (out.m_trace[j] <= floor) break;
    const double t = out.times[j], y = std::log(out.m_trace[j]);
    st += t;
    sy += y;
    stt += t * t;
    sty += t * y;
    ++cnt;
  }
  if (cnt >= 2) {
    const double denom = cnt * stt - st * st;
    out.fitted_rate = denom > 0 ? (cnt * sty - st * sy) / denom : 0.0;
  }
  return out;
}

ObservabilityMetrics observability_metrics(const Vec& u_true, const Mat& X,
                                           const Vec& rho_true,
                                           const TriMesh& mesh,
                                           DistanceMode mode) {
  check_positions(X, mesh, "observability_metrics");
  if (u_true.size() != mesh.n_vertices())
    throw ValidationError("observability_metrics: field size does not match the mesh");
  ObservabilityMetrics out;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const PointLocation loc = locate_point(mesh, X.row(i).transpose());
    out.u_obs_mean += std::abs(interpolate(mesh, u_true, loc));
  }
  out.u_obs_mean /= double(X.rows());
  out.j_true = coverage_energy(X, rho_true, mesh, mode);
  return out;
}

}  // namespace cnwf
