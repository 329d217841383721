#include "cnwf/geodesy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

#include "cnwf/errors.hpp"
#include "cnwf/fast_marching.hpp"

namespace cnwf {

namespace {

constexpr double kInf = std::numeric_limits<double>::max();

/// Accept points on the closed domain; tolerate roundoff at the boundary.
PointLocation locate_or_throw(const TriMesh& mesh, const Vec2& p,
                              const char* who) {
  PointLocation loc = locate_point(mesh, p);
  if (!loc.inside)
    throw ValidationError(std::string(who) + ": point (" +
                          std::to_string(p.x()) + ", " + std::to_string(p.y()) +
                          ") is outside the mesh");
  return loc;
}

}  // namespace

Vec boundary_distance_field(const TriMesh& mesh) {
  std::vector<std::pair<int, double>> seeds;
  for (int v = 0; v < mesh.n_vertices(); ++v)
    if (mesh.vertex_on_boundary[v]) seeds.emplace_back(v, 0.0);
  if (seeds.empty())
    throw ValidationError("boundary_distance_field: mesh has no boundary");
  return fast_marching(mesh, seeds);
}

namespace {

/// True if the open segment p-q stays inside the triangulation (sampled).
bool segment_inside(const TriMesh& mesh, const Vec2& p, const Vec2& q) {
  const int samples = 6;
  for (int s = 1; s < samples; ++s) {
    const double t = static_cast<double>(s) / samples;
    if (!locate_point(mesh, (1.0 - t) * p + t * q).inside) return false;
  }
  return true;
}

}  // namespace

DistanceField distance_field(const TriMesh& mesh, const Vec2& source) {
  PointLocation loc = locate_or_throw(mesh, source, "distance_field");
  // Exact initialization ball: first-order marching is least accurate where
  // the front is most curved, so all line-of-sight vertices within a few
  // edge lengths are seeded with their exact Euclidean distance.
  const double ball = 2.5 * mesh.h_max;
  std::vector<std::pair<int, double>> seeds;
  for (int v = 0; v < mesh.n_vertices(); ++v) {
    const double d = (mesh.vertex(v) - source).norm();
    if (d > ball) continue;
    if (d > 1e-14 && !segment_inside(mesh, source, mesh.vertex(v))) continue;
    seeds.emplace_back(v, d);
  }
  for (int k = 0; k < 3; ++k) {
    const int v = mesh.triangles(loc.tri, k);
    seeds.emplace_back(v, (mesh.vertex(v) - source).norm());
  }
  DistanceField f;
  f.source = source;
  f.d = fast_marching(mesh, seeds);
  return f;
}

Vec distances_from(const TriMesh& mesh, const Vec2& p, DistanceMode mode) {
  if (mode == DistanceMode::kEuclidean) {
    Vec d(mesh.n_vertices());
    for (int v = 0; v < mesh.n_vertices(); ++v)
      d[v] = (mesh.vertex(v) - p).norm();
    return d;
  }
  return distance_field(mesh, p).d;
}

double distance_at(const TriMesh& mesh, const DistanceField& field,
                   const Vec2& p) {
  PointLocation loc = locate_or_throw(mesh, p, "distance_at");
  double v = 0;
  for (int k = 0; k < 3; ++k) {
    const double dv = field.d[mesh.triangles(loc.tri, k)];
    if (dv == kInf) return kInf;
    v += loc.bary[k] * dv;
  }
  return v;
}

VoronoiPartition geodesic_voronoi(const TriMesh& mesh, const Mat& generators,
                                  DistanceMode mode) {
  const int n = static_cast<int>(generators.rows());
  if (n < 1) throw ValidationError("geodesic_voronoi: no generators");
  VoronoiPartition part;
  part.dist.resize(n, mesh.n_vertices());
  for (int i = 0; i < n; ++i)
    part.dist.row(i) =
        distances_from(mesh, generators.row(i).transpose(), mode).transpose();

  part.cell.resize(mesh.n_vertices());
  part.tie.assign(mesh.n_vertices(), 0);
  for (int v = 0; v < mesh.n_vertices(); ++v) {
    int best = 0;
    double second = kInf;
    for (int i = 1; i < n; ++i) {
      if (part.dist(i, v) < part.dist(best, v)) {
        second = part.dist(best, v);
        best = i;
      } else {
        second = std::min(second, part.dist(i, v));
      }
    }
    part.cell[v] = best;
    if (n > 1 && second - part.dist(best, v) <=
                     1e-12 * (1.0 + std::abs(part.dist(best, v))))
      part.tie[v] = 1;
  }
  return part;
}

// ============================================================================
// Shortest paths
// ============================================================================

namespace {

/// True if the segment p-q stays inside the triangulation, sampled densely
/// relative to the mesh resolution.
bool segment_clear(const TriMesh& mesh, const Vec2& p, const Vec2& q) {
  const double len = (q - p).norm();
  int samples = static_cast<int>(len / (0.2 * mesh.h_min)) + 2;
  samples = std::min(samples, 4096);
  for (int s = 1; s < samples; ++s) {
    const double t = static_cast<double>(s) / samples;
    if (!locate_point(mesh, (1.0 - t) * p + t * q).inside) return false;
  }
  return true;
}

/// Rubber-band pass: greedily replace runs of the polyline by straight
/// segments whenever the chord stays inside the domain. Descent and edge
/// polylines zig-zag at the mesh scale; this removes that excess length
/// while preserving feasibility.
void greedy_shortcut(const TriMesh& mesh, std::vector<Vec2>& pts) {
  if (pts.size() < 3) return;
  std::vector<Vec2> out;
  out.push_back(pts.front());
  size_t i = 0;
  while (i + 1 < pts.size()) {
    // Exponential probe for the furthest visible point, then refine.
    size_t hi = i + 1;
    size_t stride = 1;
    while (hi + stride < pts.size() &&
           segment_clear(mesh, pts[i], pts[hi + stride])) {
      hi += stride;
      stride *= 2;
    }
    const size_t hi_bound = std::min(pts.size() - 1, hi + stride);
    while (hi + 1 <= hi_bound && segment_clear(mesh, pts[i], pts[hi + 1]))
      ++hi;
    out.push_back(pts[hi]);
    i = hi;
  }
  pts = std::move(out);
}

void shortcut_polyline(const TriMesh& mesh, std::vector<Vec2>& pts) {
  greedy_shortcut(mesh, pts);
  std::reverse(pts.begin(), pts.end());
  greedy_shortcut(mesh, pts);
  std::reverse(pts.begin(), pts.end());
}

GeodesicPath finalize_path(Mat points, bool fallback) {
  GeodesicPath p;
  p.points = std::move(points);
  const int k = static_cast<int>(p.points.rows());
  p.arclen.resize(k);
  p.arclen[0] = 0.0;
  for (int i = 1; i < k; ++i)
    p.arclen[i] = p.arclen[i - 1] +
                  (p.points.row(i) - p.points.row(i - 1)).norm();
  p.length = p.arclen[k - 1];
  p.dijkstra_fallback = fallback;
  return p;
}

/// Edge-graph Dijkstra from the vertices of b's triangle; returns the vertex
/// polyline a -> ... -> b.
GeodesicPath dijkstra_path(const TriMesh& mesh, const Vec2& a, const Vec2& b) {
  PointLocation la = locate_or_throw(mesh, a, "shortest_path");
  PointLocation lb = locate_or_throw(mesh, b, "shortest_path");

  const int n = mesh.n_vertices();
  Vec dist = Vec::Constant(n, kInf);
  std::vector<int> pred(n, -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  for (int k = 0; k < 3; ++k) {
    const int v = mesh.triangles(lb.tri, k);
    const double d0 = (mesh.vertex(v) - b).norm();
    if (d0 < dist[v]) {
      dist[v] = d0;
      heap.emplace(d0, v);
    }
  }
  while (!heap.empty()) {
    auto [d, v] = heap.top();
    heap.pop();
    if (d > dist[v]) continue;
    for (int t : mesh.vertex_tris[v]) {
      for (int k = 0; k < 3; ++k) {
        const int w = mesh.triangles(t, k);
        if (w == v) continue;
        const double cand = d + (mesh.vertex(w) - mesh.vertex(v)).norm();
        if (cand < dist[w]) {
          dist[w] = cand;
          pred[w] = v;
          heap.emplace(cand, w);
        }
      }
    }
  }

  int start = mesh.triangles(la.tri, 0);
  double best = kInf;
  for (int k = 0; k < 3; ++k) {
    const int v = mesh.triangles(la.tri, k);
    const double c = dist[v] + (mesh.vertex(v) - a).norm();
    if (c < best) {
      best = c;
      start = v;
    }
  }
  if (dist[start] == kInf)
    throw NumericalError("shortest_path: endpoints are not connected");

  std::vector<Vec2> pts;
  pts.push_back(a);
  for (int v = start; v >= 0; v = pred[v]) pts.push_back(mesh.vertex(v));
  pts.push_back(b);
  shortcut_polyline(mesh, pts);
  Mat m(static_cast<int>(pts.size()), 2);
  for (int i = 0; i < static_cast<int>(pts.size()); ++i)
    m.row(i) = pts[i].transpose();
  return finalize_path(std::move(m), true);
}

}  // namespace

GeodesicPath shortest_path(const TriMesh& mesh, const Vec2& a, const Vec2& b,
                           DistanceMode mode) {
  locate_or_throw(mesh, a, "shortest_path");
  locate_or_throw(mesh, b, "shortest_path");

  if ((a - b).norm() <= 1e-14) {
    Mat single(1, 2);
    single.row(0) = a.transpose();
    return finalize_path(std::move(single), false);
  }

  if (mode == DistanceMode::kEuclidean) {
    Mat seg(2, 2);
    seg.row(0) = a.transpose();
    seg.row(1) = b.transpose();
    return finalize_path(std::move(seg), false);
  }

  // Steepest descent on the distance field of b.
  DistanceField field = distance_field(mesh, b);
  const double step = 0.5 * mesh.h_min;
  const int max_points =
      static_cast<int>(64.0 * (field.d.maxCoeff() == kInf
                                   ? mesh.n_vertices()
                                   : field.d.maxCoeff() / step)) + 64;

  std::vector<Vec2> pts;
  pts.push_back(a);
  Vec2 p = a;
  PointLocation loc = locate_point(mesh, p);
  double dp = distance_at(mesh, field, p);
  if (dp == kInf) return dijkstra_path(mesh, a, b);

  bool ok = true;
  while (static_cast<int>(pts.size()) < max_points) {
    if ((p - b).norm() <= 1.5 * step || dp <= 0.75 * step) break;
    // Per-triangle constant gradient of the P1 distance field.
    Vec2 g = Vec2::Zero();
    for (int k = 0; k < 3; ++k)
      g += field.d[mesh.triangles(loc.tri, k)] * Vec2(mesh.grad(loc.tri, k));
    if (g.norm() < 1e-12) {
      ok = false;
      break;
    }
    const Vec2 dir = -g.normalized();

    double s = std::min(step, dp);
    bool moved = false;
    for (int half = 0; half < 12; ++half) {
      const Vec2 q = p + s * dir;
      PointLocation lq = locate_point(mesh, q);
      if (lq.inside) {
        double dq = 0;
        for (int k = 0; k < 3; ++k)
          dq += lq.bary[k] * field.d[mesh.triangles(lq.tri, k)];
        if (dq < dp - 1e-14) {
          p = q;
          loc = lq;
          dp = dq;
          pts.push_back(p);
          moved = true;
          break;
        }
      }
      s *= 0.5;
    }
    if (!moved) {
      ok = false;
      break;
    }
  }
  if (!ok || static_cast<int>(pts.size()) >= max_points)
    return dijkstra_path(mesh, a, b);

  pts.push_back(b);
  shortcut_polyline(mesh, pts);
  Mat m(static_cast<int>(pts.size()), 2);
  for (int i = 0; i < static_cast<int>(pts.size()); ++i)
    m.row(i) = pts[i].transpose();
  return finalize_path(std::move(m), false);
}

Vec2 point_along_path(const GeodesicPath& path, double s) {
  const int k = static_cast<int>(path.points.rows());
  if (k == 0) throw ValidationError("point_along_path: empty path");
  if (k == 1 || s <= 0.0) return path.points.row(0).transpose();
  if (s >= path.length) return path.points.row(k - 1).transpose();
  int lo = 0, hi = k - 1;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (path.arclen[mid] <= s)
      lo = mid;
    else
      hi = mid;
  }
  const double seg = path.arclen[hi] - path.arclen[lo];
  const double t = seg > 0 ? (s - path.arclen[lo]) / seg : 0.0;
  return ((1.0 - t) * path.points.row(lo) + t * path.points.row(hi)).transpose();
}

}  // namespace cnwf
