#include "cnwf/fast_marching.hpp"

#include <cmath>
#include <limits>
#include <queue>

#include "cnwf/errors.hpp"

namespace cnwf {

namespace {

constexpr double kInf = std::numeric_limits<double>::max();

struct Solver {
  const TriMesh& mesh;
  const Vec& dist;
  const std::vector<std::uint8_t>& frozen;

  /// Plane-wave update of vertex position `pv` from edge (a, b) with frozen
  /// values da, db. Returns +inf when the characteristic misses the edge.
  double planar_update(const Vec2& pv, const Vec2& pa, const Vec2& pb,
                       double da, double db) const {
    Vec2 e = pb - pa;
    const double len = e.norm();
    if (len < 1e-300) return kInf;
    e /= len;
    const double u = (db - da) / len;
    if (std::abs(u) >= 1.0) return kInf;
    Vec2 rel = pv - pa;
    const double cx = rel.dot(e);
    const double cy = std::abs(rel.x() * e.y() - rel.y() * e.x());
    if (cy < 1e-300) return kInf;
    const double s = std::sqrt(1.0 - u * u);
    // Characteristic foot on the segment [0, len].
    const double foot = cx - u * cy / s;
    if (foot < 0.0 || foot > len) return kInf;
    return da + u * cx + s * cy;
  }

  /// Update through support edge (a, b); splits across the opposite triangle
  /// when the angle subtended at v is obtuse. `from_tri` is the triangle the
  /// wedge currently lives in (used to find the next one across (a, b)).
  double wedge_update(int v, const Vec2& pv, int a, int b, int from_tri,
                      int depth) const {
    double best = kInf;
    if (frozen[a] && frozen[b]) {
      const double two =
          planar_update(pv, mesh.vertex(a), mesh.vertex(b), dist[a], dist[b]);
      best = std::min(best, two);
    }
    // Obtuse wedge: recurse through the neighbouring triangle's far vertex.
    Vec2 ra = mesh.vertex(a) - pv, rb = mesh.vertex(b) - pv;
    if (depth > 0 && ra.dot(rb) < 0.0) {
      // Find the shared edge id and the triangle across it.
      int eid = -1;
      for (int k = 0; k < 3; ++k) {
        int e = mesh.tri_edges(from_tri, k);
        int t0 = mesh.edges(e, 0), t1 = mesh.edges(e, 1);
        if ((t0 == a && t1 == b) || (t0 == b && t1 == a)) {
          eid = e;
          break;
        }
      }
      if (eid >= 0 && !mesh.edge_on_boundary[eid]) {
        const int next = (mesh.edge_tris(eid, 0) == from_tri)
                             ? mesh.edge_tris(eid, 1)
                             : mesh.edge_tris(eid, 0);
        int c = -1;
        for (int k = 0; k < 3; ++k) {
          int w = mesh.triangles(next, k);
          if (w != a && w != b) c = w;
        }
        if (c >= 0) {
          // c must lie inside the wedge (v->a, v->b) for the split to be a
          // genuine refinement; in a planar mesh this can fail for strongly
          // non-convex fans, in which case we stop.
          Vec2 rc = mesh.vertex(c) - pv;
          const double cross_ac = ra.x() * rc.y() - ra.y() * rc.x();
          const double cross_cb = rc.x() * rb.y() - rc.y() * rb.x();
          const double cross_ab = ra.x() * rb.y() - ra.y() * rb.x();
          if (cross_ac * cross_ab >= 0.0 && cross_cb * cross_ab >= 0.0) {
            best = std::min(best, wedge_update(v, pv, a, c, next, depth - 1));
            best = std::min(best, wedge_update(v, pv, c, b, next, depth - 1));
          }
        }
      }
    }
    return best;
  }

  /// Best available update for vertex v over all incident triangles,
  /// including single-neighbor (Dijkstra) candidates.
  double update(int v) const {
    const Vec2 pv = mesh.vertex(v);
    double best = kInf;
    for (int t : mesh.vertex_tris[v]) {
      int others[2], no = 0;
      for (int k = 0; k < 3; ++k) {
        int w = mesh.triangles(t, k);
        if (w != v) others[no++] = w;
      }
      for (int w : others)
        if (frozen[w]) best = std::min(best, dist[w] + (mesh.vertex(w) - pv).norm());
      best = std::min(best, wedge_update(v, pv, others[0], others[1], t, 8));
    }
    return best;
  }
};

}  // namespace

Vec fast_marching(const TriMesh& mesh,
                  const std::vector<std::pair<int, double>>& seeds) {
  if (seeds.empty()) throw ValidationError("fast_marching: no seeds");
  const int n = mesh.n_vertices();
  Vec dist = Vec::Constant(n, kInf);
  std::vector<std::uint8_t> frozen(n, 0);
  Solver solver{mesh, dist, frozen};

  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  for (auto [v, d0] : seeds) {
    if (v < 0 || v >= n) throw ValidationError("fast_marching: seed out of range");
    if (d0 < 0) throw ValidationError("fast_marching: negative seed value");
    if (d0 < dist[v]) {
      dist[v] = d0;
      heap.emplace(d0, v);
    }
  }

  while (!heap.empty()) {
    auto [d, v] = heap.top();
    heap.pop();
    if (frozen[v] || d > dist[v]) continue;
    frozen[v] = 1;
    // Relax every non-frozen vertex sharing a triangle with v.
    for (int t : mesh.vertex_tris[v]) {
      for (int k = 0; k < 3; ++k) {
        const int w = mesh.triangles(t, k);
        if (w == v || frozen[w]) continue;
        const double cand = solver.update(w);
        if (cand < dist[w]) {
          dist[w] = cand;
          heap.emplace(cand, w);
        }
      }
    }
  }

  // Disconnected vertices keep +inf; callers treat that as unreachable.
  return dist;
}

}  // namespace cnwf
