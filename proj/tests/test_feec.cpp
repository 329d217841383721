#include "cnwf/feec.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cnwf/errors.hpp"
#include "cnwf/mesh.hpp"
#include "cnwf/rng.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace cnwf;

namespace {

double max_abs_diff(const SpMat& a, const SpMat& b) {
  SpMat d = a - b;
  double m = 0;
  for (int k = 0; k < d.outerSize(); ++k)
    for (SpMat::InnerIterator it(d, k); it; ++it)
      m = std::max(m, std::abs(it.value()));
  return m;
}

/// Symbolic edge-mass oracle for one triangle: expands
///   (phi_a grad phi_b - phi_b grad phi_a) . (phi_c grad phi_d - phi_d grad phi_c)
/// with exact P1 products int phi_i phi_j = A/12 (1 + delta_ij).
double edge_mass_oracle(const TriMesh& m, int t, int e1, int e2) {
  const int v[3] = {m.triangles(t, 0), m.triangles(t, 1), m.triangles(t, 2)};
  auto local = [&](int g) {
    for (int l = 0; l < 3; ++l)
      if (v[l] == g) return l;
    return -1;
  };
  const int a = local(m.edges(e1, 0)), b = local(m.edges(e1, 1));
  const int c = local(m.edges(e2, 0)), d = local(m.edges(e2, 1));
  const double A = m.tri_area[t];
  auto iphi = [&](int i, int j) { return A / 12.0 * (i == j ? 2.0 : 1.0); };
  auto g = [&](int i) { return Vec2(m.grad(t, i)); };
  return g(b).dot(g(d)) * iphi(a, c) - g(b).dot(g(c)) * iphi(a, d) -
         g(a).dot(g(d)) * iphi(b, c) + g(a).dot(g(c)) * iphi(b, d);
}

Mat dense_edge_mass_oracle(const TriMesh& m) {
  Mat out = Mat::Zero(m.n_edges(), m.n_edges());
  for (int t = 0; t < m.n_triangles(); ++t)
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l) {
        int e1 = m.tri_edges(t, k), e2 = m.tri_edges(t, l);
        out(e1, e2) += edge_mass_oracle(m, t, e1, e2);
      }
  return out;
}

}  // namespace

TEST_CASE("mass0: single unit right triangle matches the closed form") {
  TriMesh m = testutil::single_triangle();
  Mat m0 = Mat(assemble_mass0(m));
  const double A = 0.5;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(m0(i, j) == doctest::Approx(i == j ? A / 6 : A / 12).epsilon(1e-15));
  CHECK(lumped_mass0(m).sum() == doctest::Approx(A).epsilon(1e-15));
  CHECK(integrate_p1(m, Vec::Ones(3)) == doctest::Approx(A).epsilon(1e-15));
}

TEST_CASE("mass1: assembly matches the symbolic expansion oracle") {
  // Single triangle, a square, and an irregular disk mesh.
  Rng rng(7);
  for (int c = 0; c < 3; ++c) {
    TriMesh m = c == 0   ? testutil::single_triangle()
                : c == 1 ? testutil::two_triangle_square()
                         : testutil::jiggle_interior(
                               generate_disk_mesh(1.0, 0.34), rng, 0.05);
    Mat oracle = dense_edge_mass_oracle(m);
    Mat built = Mat(assemble_mass1(m));
    CHECK((built - oracle).cwiseAbs().maxCoeff() <= 1e-13);
  }
}

TEST_CASE("coboundary: signed incidence with head-minus-tail convention") {
  TriMesh m = testutil::single_triangle();
  SpMat d0 = coboundary0(m);
  REQUIRE(d0.rows() == 3);
  // Edges are sorted lexicographically: (0,1), (0,2), (1,2).
  Vec a(3);
  a << 5.0, 7.0, 11.0;
  Vec da = d0 * a;
  CHECK(da[0] == 7.0 - 5.0);
  CHECK(da[1] == 11.0 - 5.0);
  CHECK(da[2] == 11.0 - 7.0);
  // Rows sum to zero: constants are in the kernel.
  CHECK((d0 * Vec::Ones(3)).cwiseAbs().maxCoeff() == 0.0);

  TriMesh disk = generate_disk_mesh(1.0, 0.25);
  CHECK((coboundary0(disk) * Vec::Ones(disk.n_vertices())).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("structure: D0^T M1 D0 reproduces the P1 stiffness matrix") {
  Rng rng(123);
  for (int trial = 0; trial < 5; ++trial) {
    const double radius = rng.uniform(0.7, 1.3);
    const double h = (trial % 2 == 0 ? 0.1 : 0.05) * radius;
    TriMesh m = testutil::jiggle_interior(generate_disk_mesh(radius, h), rng,
                                          0.15 * h);
    SpMat d0 = coboundary0(m);
    SpMat m1 = assemble_mass1(m);
    SpMat k = assemble_stiffness_p1(m);
    SpMat lhs = d0.transpose() * m1 * d0;
    CHECK(max_abs_diff(lhs, k) <= 1e-10);
  }
}

TEST_CASE("structure: Galerkin energy consistency for random vertex data") {
  Rng rng(5);
  TriMesh m = testutil::jiggle_interior(generate_disk_mesh(1.0, 0.2), rng, 0.02);
  SpMat k = assemble_stiffness_p1(m);
  for (int trial = 0; trial < 5; ++trial) {
    Vec a = rng.normal_vec(m.n_vertices());
    // Direct evaluation: gradients of P1 fields are constant per triangle.
    double direct = 0;
    for (int t = 0; t < m.n_triangles(); ++t) {
      Vec2 g = Vec2::Zero();
      for (int kk = 0; kk < 3; ++kk) g += a[m.triangles(t, kk)] * Vec2(m.grad(t, kk));
      direct += m.tri_area[t] * g.squaredNorm();
    }
    const double quad = a.dot(k * a);
    CHECK(quad == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("mass matrices are symmetric positive definite") {
  for (const TriMesh& m :
       {testutil::two_triangle_square(), generate_disk_mesh(1.0, 0.34)}) {
    Mat m0 = Mat(assemble_mass0(m));
    Mat m1 = Mat(assemble_mass1(m));
    CHECK((m0 - m0.transpose()).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((m1 - m1.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK(Eigen::LLT<Mat>(m0).info() == Eigen::Success);
    CHECK(Eigen::LLT<Mat>(m1).info() == Eigen::Success);
  }
}

TEST_CASE("orientation covariance: flipping a stored edge conjugates by signs") {
  TriMesh m = generate_disk_mesh(1.0, 0.34);
  SpMat m1 = assemble_mass1(m);
  SpMat d0 = coboundary0(m);
  SpMat k = assemble_stiffness_p1(m);

  TriMesh flipped = m;
  const int e_flip = 3;
  std::swap(flipped.edges(e_flip, 0), flipped.edges(e_flip, 1));
  SpMat m1f = assemble_mass1(flipped);
  SpMat d0f = coboundary0(flipped);

  Vec s = Vec::Ones(m.n_edges());
  s[e_flip] = -1.0;
  SpMat smat(m.n_edges(), m.n_edges());
  std::vector<Trip> strips;
  for (int e = 0; e < m.n_edges(); ++e) strips.emplace_back(e, e, s[e]);
  smat.setFromTriplets(strips.begin(), strips.end());

  CHECK(max_abs_diff(m1f, SpMat(smat * m1 * smat)) <= 1e-14);
  CHECK(max_abs_diff(d0f, SpMat(smat * d0)) <= 1e-14);
  // Orientation-invariant scalars are untouched.
  CHECK(max_abs_diff(SpMat(d0f.transpose() * m1f * d0f), k) <= 1e-10);
  Rng rng(9);
  Vec y = rng.normal_vec(m.n_edges());
  Vec yf = s.asDiagonal() * y;  // covariant coefficients
  CHECK(y.dot(m1 * y) == doctest::Approx(yf.dot(m1f * yf)).epsilon(1e-13));
}

TEST_CASE("coordinate-format matrix dump") {
  TriMesh m = testutil::single_triangle();
  SpMat m0 = assemble_mass0(m);
  const std::string path = "/tmp/cnwf_test_m0.txt";
  dump_matrix_coordinate(m0, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  long rows, cols, nnz;
  in >> rows >> cols >> nnz;
  CHECK(rows == 3);
  CHECK(cols == 3);
  CHECK(nnz == m0.nonZeros());
  long r, c;
  double v;
  long count = 0;
  while (in >> r >> c >> v) {
    CHECK(v == doctest::Approx(m0.coeff(r, c)).epsilon(1e-16));
    ++count;
  }
  CHECK(count == nnz);
}
