#include "cnwf/feec.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/quadrature.hpp"

namespace cnwf {

SpMat assemble_mass0(const TriMesh& mesh) {
  std::vector<Trip> trips;
  trips.reserve(static_cast<std::size_t>(9 * mesh.n_triangles()));
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const double a = mesh.tri_area[t];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trips.emplace_back(mesh.triangles(t, i), mesh.triangles(t, j),
                           (i == j ? a / 6.0 : a / 12.0));
  }
  SpMat m(mesh.n_vertices(), mesh.n_vertices());
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

SpMat assemble_mass1(const TriMesh& mesh) {
  const QuadratureRule q = triangle_quadrature(2);
  std::vector<Trip> trips;
  trips.reserve(static_cast<std::size_t>(9 * mesh.n_triangles()));

  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const int v[3] = {mesh.triangles(t, 0), mesh.triangles(t, 1),
                      mesh.triangles(t, 2)};
    // Local vertex index of each edge's tail and head, to look up phi/grad.
    int eid[3], etail[3], ehead[3];
    for (int k = 0; k < 3; ++k) {
      eid[k] = mesh.tri_edges(t, k);
      const int tail = mesh.edges(eid[k], 0), head = mesh.edges(eid[k], 1);
      int lt = -1, lh = -1;
      for (int l = 0; l < 3; ++l) {
        if (v[l] == tail) lt = l;
        if (v[l] == head) lh = l;
      }
      etail[k] = lt;
      ehead[k] = lh;
    }

    const double a = mesh.tri_area[t];
    double acc[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    for (int g = 0; g < q.size(); ++g) {
      Vec2 w[3];
      for (int k = 0; k < 3; ++k) {
        const double phi_t = q.bary(g, etail[k]);
        const double phi_h = q.bary(g, ehead[k]);
        w[k] = phi_t * mesh.grad(t, ehead[k]) - phi_h * mesh.grad(t, etail[k]);
      }
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) acc[k][l] += q.w[g] * w[k].dot(w[l]);
    }
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l)
        trips.emplace_back(eid[k], eid[l], a * acc[k][l]);
  }

  SpMat m(mesh.n_edges(), mesh.n_edges());
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

SpMat coboundary0(const TriMesh& mesh) {
  std::vector<Trip> trips;
  trips.reserve(static_cast<std::size_t>(2 * mesh.n_edges()));
  for (int e = 0; e < mesh.n_edges(); ++e) {
    trips.emplace_back(e, mesh.edges(e, 1), 1.0);   // head
    trips.emplace_back(e, mesh.edges(e, 0), -1.0);  // tail
  }
  SpMat d(mesh.n_edges(), mesh.n_vertices());
  d.setFromTriplets(trips.begin(), trips.end());
  return d;
}

SpMat assemble_stiffness_p1(const TriMesh& mesh) {
  std::vector<Trip> trips;
  trips.reserve(static_cast<std::size_t>(9 * mesh.n_triangles()));
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const double a = mesh.tri_area[t];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trips.emplace_back(mesh.triangles(t, i), mesh.triangles(t, j),
                           a * mesh.grad(t, i).dot(mesh.grad(t, j)));
  }
  SpMat k(mesh.n_vertices(), mesh.n_vertices());
  k.setFromTriplets(trips.begin(), trips.end());
  return k;
}

Vec lumped_mass0(const TriMesh& mesh) {
  Vec l = Vec::Zero(mesh.n_vertices());
  for (int t = 0; t < mesh.n_triangles(); ++t)
    for (int i = 0; i < 3; ++i) l[mesh.triangles(t, i)] += mesh.tri_area[t] / 3.0;
  return l;
}

double integrate_p1(const TriMesh& mesh, const Vec& nodal) {
  if (nodal.size() != mesh.n_vertices())
    throw ValidationError("integrate_p1: nodal size mismatch");
  double s = 0;
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const double avg = (nodal[mesh.triangles(t, 0)] + nodal[mesh.triangles(t, 1)] +
                        nodal[mesh.triangles(t, 2)]) / 3.0;
    s += avg * mesh.tri_area[t];
  }
  return s;
}

FineComplex build_fine_complex(const TriMesh& mesh) {
  FineComplex fc;
  fc.M0 = assemble_mass0(mesh);
  fc.M1 = assemble_mass1(mesh);
  fc.D0 = coboundary0(mesh);
  fc.K = assemble_stiffness_p1(mesh);
  fc.lumped = lumped_mass0(mesh);
  return fc;
}

void dump_matrix_coordinate(const SpMat& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("dump_matrix_coordinate: cannot open '" + path + "'");
  out << m.rows() << " " << m.cols() << " " << m.nonZeros() << "\n";
  char buf[96];
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SpMat::InnerIterator it(m, k); it; ++it) {
      std::snprintf(buf, sizeof(buf), "%ld %ld %.17g\n",
                    static_cast<long>(it.row()), static_cast<long>(it.col()),
                    it.value());
      out << buf;
    }
  }
}

}  // namespace cnwf
