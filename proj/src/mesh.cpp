#include "cnwf/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "cnwf/errors.hpp"

namespace cnwf {

namespace {

constexpr double kPi = 3.14159265358979323846;

double signed_area(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) -
                (b.y() - a.y()) * (c.x() - a.x()));
}

std::uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
}

}  // namespace

std::vector<int> TriMesh::dirichlet_list() const {
  std::vector<int> out;
  for (int i = 0; i < n_vertices(); ++i)
    if (vertex_dirichlet[i]) out.push_back(i);
  return out;
}

std::vector<int> TriMesh::boundary_list() const {
  std::vector<int> out;
  for (int i = 0; i < n_vertices(); ++i)
    if (vertex_on_boundary[i]) out.push_back(i);
  return out;
}

TriMesh build_mesh(Mat vertices, Eigen::Matrix<int, Eigen::Dynamic, 3> triangles,
                   const std::vector<int>& dirichlet) {
  const int n0 = static_cast<int>(vertices.rows());
  const int nt = static_cast<int>(triangles.rows());
  if (n0 < 3) throw ValidationError("mesh: fewer than 3 vertices");
  if (nt < 1) throw ValidationError("mesh: no triangles");
  if (!vertices.allFinite()) throw ValidationError("mesh: non-finite vertex coordinates");

  TriMesh m;
  for (int t = 0; t < nt; ++t) {
    for (int k = 0; k < 3; ++k) {
      int v = triangles(t, k);
      if (v < 0 || v >= n0)
        throw ValidationError("mesh: triangle " + std::to_string(t) +
                              " references vertex " + std::to_string(v) +
                              " out of range");
    }
    if (triangles(t, 0) == triangles(t, 1) ||
        triangles(t, 1) == triangles(t, 2) ||
        triangles(t, 0) == triangles(t, 2))
      throw ValidationError("mesh: triangle " + std::to_string(t) +
                            " has repeated vertices");
  }

  // Orientation normalization: every triangle CCW.
  for (int t = 0; t < nt; ++t) {
    Vec2 a = vertices.row(triangles(t, 0)).transpose();
    Vec2 b = vertices.row(triangles(t, 1)).transpose();
    Vec2 c = vertices.row(triangles(t, 2)).transpose();
    if (signed_area(a, b, c) < 0) std::swap(triangles(t, 1), triangles(t, 2));
  }

  m.vertices = std::move(vertices);
  m.triangles = std::move(triangles);

  // Areas and degeneracy check.
  m.tri_area.resize(nt);
  for (int t = 0; t < nt; ++t) {
    Vec2 a = m.vertex(m.triangles(t, 0));
    Vec2 b = m.vertex(m.triangles(t, 1));
    Vec2 c = m.vertex(m.triangles(t, 2));
    m.tri_area[t] = signed_area(a, b, c);
  }
  const double mean_area = m.tri_area.sum() / nt;
  for (int t = 0; t < nt; ++t)
    if (!(m.tri_area[t] > 1e-12 * mean_area))
      throw ValidationError("mesh: triangle " + std::to_string(t) +
                            " is degenerate (area " +
                            std::to_string(m.tri_area[t]) + ")");

  // Unique edge set, canonical orientation tail < head, sorted for
  // deterministic ids independent of triangle order.
  std::unordered_map<std::uint64_t, int> incident;
  incident.reserve(static_cast<std::size_t>(3 * nt));
  for (int t = 0; t < nt; ++t) {
    const int v[3] = {m.triangles(t, 0), m.triangles(t, 1), m.triangles(t, 2)};
    const int pairs[3][2] = {{v[0], v[1]}, {v[0], v[2]}, {v[1], v[2]}};
    for (auto& p : pairs) incident[edge_key(p[0], p[1])]++;
  }
  std::vector<std::pair<int, int>> edge_list;
  edge_list.reserve(incident.size());
  for (auto& [key, count] : incident) {
    if (count > 2) {
      int a = static_cast<int>(key >> 32), b = static_cast<int>(key & 0xffffffffu);
      throw ValidationError("mesh: non-manifold edge (" + std::to_string(a) +
                            ", " + std::to_string(b) + ") shared by " +
                            std::to_string(count) + " triangles");
    }
    edge_list.emplace_back(static_cast<int>(key >> 32),
                           static_cast<int>(key & 0xffffffffu));
  }
  std::sort(edge_list.begin(), edge_list.end());
  const int ne = static_cast<int>(edge_list.size());
  m.edges.resize(ne, 2);
  std::unordered_map<std::uint64_t, int> edge_id;
  edge_id.reserve(edge_list.size());
  for (int e = 0; e < ne; ++e) {
    m.edges(e, 0) = edge_list[e].first;
    m.edges(e, 1) = edge_list[e].second;
    edge_id[edge_key(edge_list[e].first, edge_list[e].second)] = e;
  }

  m.tri_edges.resize(nt, 3);
  m.edge_tris.setConstant(ne, 2, -1);
  for (int t = 0; t < nt; ++t) {
    const int v[3] = {m.triangles(t, 0), m.triangles(t, 1), m.triangles(t, 2)};
    const int pairs[3][2] = {{v[0], v[1]}, {v[0], v[2]}, {v[1], v[2]}};
    for (int k = 0; k < 3; ++k) {
      int e = edge_id.at(edge_key(pairs[k][0], pairs[k][1]));
      m.tri_edges(t, k) = e;
      if (m.edge_tris(e, 0) < 0)
        m.edge_tris(e, 0) = t;
      else
        m.edge_tris(e, 1) = t;
    }
  }

  // Boundary flags: edges with a single incident triangle.
  m.edge_on_boundary.assign(ne, 0);
  m.vertex_on_boundary.assign(n0, 0);
  for (int e = 0; e < ne; ++e) {
    if (m.edge_tris(e, 1) < 0) {
      m.edge_on_boundary[e] = 1;
      m.vertex_on_boundary[m.edges(e, 0)] = 1;
      m.vertex_on_boundary[m.edges(e, 1)] = 1;
    }
  }

  // Dirichlet tags: explicit list, or all boundary vertices.
  m.vertex_dirichlet.assign(n0, 0);
  if (dirichlet.empty()) {
    m.vertex_dirichlet = m.vertex_on_boundary;
  } else {
    for (int v : dirichlet) {
      if (v < 0 || v >= n0)
        throw ValidationError("mesh: Dirichlet tag " + std::to_string(v) +
                              " out of range");
      m.vertex_dirichlet[v] = 1;
    }
  }

  // P1 basis gradients: grad phi_0 = perp(P2 - P1) / (2A), cyclic.
  m.tri_grad.resize(3 * nt, 2);
  for (int t = 0; t < nt; ++t) {
    Vec2 p[3];
    for (int k = 0; k < 3; ++k) p[k] = m.vertex(m.triangles(t, k));
    const double inv2A = 1.0 / (2.0 * m.tri_area[t]);
    for (int k = 0; k < 3; ++k) {
      Vec2 opp = p[(k + 2) % 3] - p[(k + 1) % 3];
      m.tri_grad.row(3 * t + k) << -opp.y() * inv2A, opp.x() * inv2A;
    }
  }

  // Edge-length statistics.
  m.h_max = 0.0;
  m.h_min = std::numeric_limits<double>::max();
  for (int e = 0; e < ne; ++e) {
    double len = (m.vertex(m.edges(e, 1)) - m.vertex(m.edges(e, 0))).norm();
    m.h_max = std::max(m.h_max, len);
    m.h_min = std::min(m.h_min, len);
  }

  // Vertex -> incident triangles.
  m.vertex_tris.assign(n0, {});
  for (int t = 0; t < nt; ++t)
    for (int k = 0; k < 3; ++k) m.vertex_tris[m.triangles(t, k)].push_back(t);

  // Point-location grid: bins sized to a couple of edge lengths.
  const double x0 = m.vertices.col(0).minCoeff();
  const double x1 = m.vertices.col(0).maxCoeff();
  const double y0 = m.vertices.col(1).minCoeff();
  const double y1 = m.vertices.col(1).maxCoeff();
  m.grid.cell = std::max(2.0 * m.h_max, 1e-12);
  m.grid.x0 = x0;
  m.grid.y0 = y0;
  m.grid.nx = std::max(1, static_cast<int>(std::ceil((x1 - x0) / m.grid.cell)));
  m.grid.ny = std::max(1, static_cast<int>(std::ceil((y1 - y0) / m.grid.cell)));
  m.grid.bins.assign(static_cast<std::size_t>(m.grid.nx) * m.grid.ny, {});
  for (int t = 0; t < nt; ++t) {
    double tx0 = std::numeric_limits<double>::max(), ty0 = tx0;
    double tx1 = -tx0, ty1 = -tx0;
    for (int k = 0; k < 3; ++k) {
      Vec2 p = m.vertex(m.triangles(t, k));
      tx0 = std::min(tx0, p.x()); tx1 = std::max(tx1, p.x());
      ty0 = std::min(ty0, p.y()); ty1 = std::max(ty1, p.y());
    }
    int ix0 = std::clamp(static_cast<int>((tx0 - x0) / m.grid.cell), 0, m.grid.nx - 1);
    int ix1 = std::clamp(static_cast<int>((tx1 - x0) / m.grid.cell), 0, m.grid.nx - 1);
    int iy0 = std::clamp(static_cast<int>((ty0 - y0) / m.grid.cell), 0, m.grid.ny - 1);
    int iy1 = std::clamp(static_cast<int>((ty1 - y0) / m.grid.cell), 0, m.grid.ny - 1);
    for (int iy = iy0; iy <= iy1; ++iy)
      for (int ix = ix0; ix <= ix1; ++ix)
        m.grid.bins[static_cast<std::size_t>(iy) * m.grid.nx + ix].push_back(t);
  }

  return m;
}

// ============================================================================
// Generators
// ============================================================================

TriMesh generate_disk_mesh(double radius, double target_h, int max_elements) {
  if (!(radius > 0)) throw ValidationError("generate_disk_mesh: radius must be positive");
  if (!(target_h > 0 && target_h < radius))
    throw ValidationError("generate_disk_mesh: need 0 < target_h < radius");

  const int K = std::max(1, static_cast<int>(std::ceil(radius / target_h - 1e-12)));
  const long long nt_ll = 6LL * K * K;
  if (nt_ll > max_elements)
    throw CapacityError("generate_disk_mesh: " + std::to_string(nt_ll) +
                        " elements exceed the cap of " + std::to_string(max_elements));

  const int n0 = 1 + 3 * K * (K + 1);  // 1 + sum_{k=1}^{K} 6k
  Mat vertices(n0, 2);
  vertices.row(0) << 0.0, 0.0;
  std::vector<int> ring_start(K + 1, 0);
  int idx = 1;
  for (int k = 1; k <= K; ++k) {
    ring_start[k] = idx;
    const int nk = 6 * k;
    const double rk = radius * k / K;
    for (int j = 0; j < nk; ++j) {
      const double th = 2.0 * kPi * j / nk;
      vertices.row(idx++) << rk * std::cos(th), rk * std::sin(th);
    }
  }

  Eigen::Matrix<int, Eigen::Dynamic, 3> tris(static_cast<int>(nt_ll), 3);
  int tcount = 0;
  // Center fan.
  for (int j = 0; j < 6; ++j)
    tris.row(tcount++) << 0, ring_start[1] + j, ring_start[1] + (j + 1) % 6;
  // Annulus strips, stitched by an angular two-pointer sweep.
  for (int k = 2; k <= K; ++k) {
    const int ni = 6 * (k - 1), no = 6 * k;
    const int bi = ring_start[k - 1], bo = ring_start[k];
    // Greedy shortest-diagonal advance keeps cross-ring edges short: the
    // tangential mismatch never exceeds half a ring spacing.
    auto ipos = [&](int i) { return Vec2(vertices.row(bi + (i % ni)).transpose()); };
    auto opos = [&](int j) { return Vec2(vertices.row(bo + (j % no)).transpose()); };
    int i = 0, j = 0;
    while (i < ni || j < no) {
      bool advance_inner;
      if (i >= ni) {
        advance_inner = false;
      } else if (j >= no) {
        advance_inner = true;
      } else {
        const double di = (ipos(i + 1) - opos(j)).squaredNorm();
        const double dj = (ipos(i) - opos(j + 1)).squaredNorm();
        advance_inner = di <= dj;
      }
      if (advance_inner) {
        tris.row(tcount++) << bi + (i % ni), bo + (j % no), bi + ((i + 1) % ni);
        ++i;
      } else {
        tris.row(tcount++) << bi + (i % ni), bo + (j % no), bo + ((j + 1) % no);
        ++j;
      }
    }
  }

  return build_mesh(std::move(vertices), std::move(tris));
}

TriMesh generate_rect_mesh(double x0, double y0, double x1, double y1,
                           double target_h,
                           const std::function<bool(double, double)>& keep) {
  if (!(x1 > x0 && y1 > y0))
    throw ValidationError("generate_rect_mesh: empty rectangle");
  if (!(target_h > 0))
    throw ValidationError("generate_rect_mesh: target_h must be positive");
  const int nx = std::max(1, static_cast<int>(std::ceil((x1 - x0) / target_h - 1e-12)));
  const int ny = std::max(1, static_cast<int>(std::ceil((y1 - y0) / target_h - 1e-12)));

  Mat vertices((nx + 1) * (ny + 1), 2);
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i)
      vertices.row(j * (nx + 1) + i) << x0 + (x1 - x0) * i / nx,
                                        y0 + (y1 - y0) * j / ny;

  std::vector<std::array<int, 3>> kept;
  auto vid = [nx](int i, int j) { return j * (nx + 1) + i; };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int v00 = vid(i, j), v10 = vid(i + 1, j);
      const int v01 = vid(i, j + 1), v11 = vid(i + 1, j + 1);
      const std::array<std::array<int, 3>, 2> cands = {{{v00, v10, v11},
                                                        {v00, v11, v01}}};
      for (const auto& tri : cands) {
        double cx = (vertices(tri[0], 0) + vertices(tri[1], 0) + vertices(tri[2], 0)) / 3;
        double cy = (vertices(tri[0], 1) + vertices(tri[1], 1) + vertices(tri[2], 1)) / 3;
        if (!keep || keep(cx, cy)) kept.push_back(tri);
      }
    }
  }
  if (kept.empty()) throw ValidationError("generate_rect_mesh: predicate removed all triangles");

  // Compact unused vertices.
  std::vector<int> remap(vertices.rows(), -1);
  int nv = 0;
  for (const auto& tri : kept)
    for (int v : tri)
      if (remap[v] < 0) remap[v] = nv++;
  Mat packed(nv, 2);
  for (int v = 0; v < static_cast<int>(remap.size()); ++v)
    if (remap[v] >= 0) packed.row(remap[v]) = vertices.row(v);
  Eigen::Matrix<int, Eigen::Dynamic, 3> tris(static_cast<int>(kept.size()), 3);
  for (int t = 0; t < static_cast<int>(kept.size()); ++t)
    tris.row(t) << remap[kept[t][0]], remap[kept[t][1]], remap[kept[t][2]];

  return build_mesh(std::move(packed), std::move(tris));
}

// ============================================================================
// Text I/O
// ============================================================================

TriMesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("load_mesh: cannot open '" + path + "'");

  std::string line;
  int lineno = 0;
  auto next_line = [&](bool required) -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t pos = line.find_first_not_of(" \t\r\n");
      if (pos != std::string::npos) return true;
    }
    if (required) throw ParseError("unexpected end of file", path, lineno);
    return false;
  };

  next_line(true);
  std::istringstream header(line);
  long long nv = 0, nt = 0;
  std::string extra;
  if (!(header >> nv >> nt) || (header >> extra))
    throw ParseError("expected header 'NV NT'", path, lineno);
  if (nv < 3 || nt < 1)
    throw ParseError("implausible mesh sizes in header", path, lineno);

  Mat vertices(nv, 2);
  for (long long i = 0; i < nv; ++i) {
    next_line(true);
    std::istringstream ls(line);
    double x, y;
    if (!(ls >> x >> y) || (ls >> extra))
      throw ParseError("expected vertex line 'x y'", path, lineno);
    vertices.row(i) << x, y;
  }
  Eigen::Matrix<int, Eigen::Dynamic, 3> tris(nt, 3);
  for (long long t = 0; t < nt; ++t) {
    next_line(true);
    std::istringstream ls(line);
    long long a, b, c;
    if (!(ls >> a >> b >> c) || (ls >> extra))
      throw ParseError("expected triangle line 'i j k'", path, lineno);
    if (a < 0 || a >= nv || b < 0 || b >= nv || c < 0 || c >= nv)
      throw ParseError("triangle vertex index out of range", path, lineno);
    tris.row(t) << static_cast<int>(a), static_cast<int>(b), static_cast<int>(c);
  }
  std::vector<int> dirichlet;
  while (next_line(false)) {
    std::istringstream ls(line);
    std::string tag;
    long long v;
    if (!(ls >> tag >> v) || tag != "b" || (ls >> extra))
      throw ParseError("expected boundary tag line 'b v_index'", path, lineno);
    if (v < 0 || v >= nv)
      throw ParseError("boundary tag index out of range", path, lineno);
    dirichlet.push_back(static_cast<int>(v));
  }

  try {
    return build_mesh(std::move(vertices), std::move(tris), dirichlet);
  } catch (const ValidationError& e) {
    throw ValidationError("load_mesh('" + path + "'): " + e.what());
  }
}

void save_mesh(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("save_mesh: cannot open '" + path + "'");
  char buf[128];
  out << mesh.n_vertices() << " " << mesh.n_triangles() << "\n";
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", mesh.vertices(i, 0),
                  mesh.vertices(i, 1));
    out << buf;
  }
  for (int t = 0; t < mesh.n_triangles(); ++t)
    out << mesh.triangles(t, 0) << " " << mesh.triangles(t, 1) << " "
        << mesh.triangles(t, 2) << "\n";
  for (int v = 0; v < mesh.n_vertices(); ++v)
    if (mesh.vertex_dirichlet[v]) out << "b " << v << "\n";
}

// ============================================================================
// Point location
// ============================================================================

namespace {

Vec3 barycentric(const TriMesh& m, int t, const Vec2& p) {
  Vec2 a = m.vertex(m.triangles(t, 0));
  Vec2 b = m.vertex(m.triangles(t, 1));
  Vec2 c = m.vertex(m.triangles(t, 2));
  const double invA = 1.0 / m.tri_area[t];
  Vec3 l;
  l[0] = signed_area(p, b, c) * invA;
  l[1] = signed_area(a, p, c) * invA;
  l[2] = 1.0 - l[0] - l[1];
  return l;
}

}  // namespace

PointLocation locate_point(const TriMesh& mesh, const Vec2& p) {
  PointLocation loc;
  const auto& g = mesh.grid;
  int ix = static_cast<int>((p.x() - g.x0) / g.cell);
  int iy = static_cast<int>((p.y() - g.y0) / g.cell);
  if (ix < 0 || iy < 0 || ix >= g.nx || iy >= g.ny) return loc;

  const double tol = -1e-10;
  double best = -std::numeric_limits<double>::max();
  const auto& bin = g.bins[static_cast<std::size_t>(iy) * g.nx + ix];
  for (int t : bin) {
    Vec3 l = barycentric(mesh, t, p);
    double worst = l.minCoeff();
    if (worst >= tol) {
      loc.tri = t;
      loc.bary = l;
      loc.inside = true;
      return loc;  // bins are in ascending id order: lowest id wins ties
    }
    if (worst > best) {
      best = worst;
      loc.tri = t;
      loc.bary = l;
    }
  }
  return loc;
}

double interpolate(const TriMesh& mesh, const Vec& nodal,
                   const PointLocation& loc) {
  if (!loc.inside)
    throw ValidationError("interpolate: point is outside the mesh");
  double v = 0;
  for (int k = 0; k < 3; ++k)
    v += loc.bary[k] * nodal[mesh.triangles(loc.tri, k)];
  return v;
}

std::uint64_t mesh_hash(const TriMesh& mesh) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (int v = 0; v < mesh.n_vertices(); ++v) {
    const double x = mesh.vertices(v, 0), y = mesh.vertices(v, 1);
    mix(&x, sizeof(x));
    mix(&y, sizeof(y));
  }
  for (int t = 0; t < mesh.n_triangles(); ++t)
    for (int k = 0; k < 3; ++k) {
      const std::int64_t idx = mesh.triangles(t, k);
      mix(&idx, sizeof(idx));
    }
  return h;
}

int nearest_vertex(const TriMesh& mesh, const Vec2& p) {
  int best = 0;
  double d2 = (mesh.vertex(0) - p).squaredNorm();
  for (int i = 1; i < mesh.n_vertices(); ++i) {
    double cand = (mesh.vertex(i) - p).squaredNorm();
    if (cand < d2) {
      d2 = cand;
      best = i;
    }
  }
  return best;
}

}  // namespace cnwf
