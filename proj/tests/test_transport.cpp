#include "cnwf/transport.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/feec.hpp"
#include "cnwf/rng.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace cnwf;

namespace {

DiscreteMeasure random_measure(Rng& rng, int k, double box) {
  DiscreteMeasure m;
  m.support = Mat(k, 2);
  m.weights = Vec(k);
  for (int i = 0; i < k; ++i) {
    m.support(i, 0) = rng.uniform(-box, box);
    m.support(i, 1) = rng.uniform(-box, box);
    m.weights[i] = 0.05 + rng.uniform();
  }
  m.weights /= m.weights.sum();
  return m;
}

double support_diam_sq(const DiscreteMeasure& a, const DiscreteMeasure& b) {
  double d2 = 0;
  Mat all(a.support.rows() + b.support.rows(), 2);
  all << a.support, b.support;
  for (int i = 0; i < all.rows(); ++i)
    for (int j = i + 1; j < all.rows(); ++j)
      d2 = std::max(d2, (all.row(i) - all.row(j)).squaredNorm());
  return d2;
}

/// Brute-force LP oracle for 3x3 instances: enumerate all basis subsets of
/// the 9 transport variables (rank of the constraint system is 5), keep the
/// feasible basic solutions, and take the cheapest. Independent of the
/// simplex implementation under test.
double brute_force_3x3(const Vec& a, const Vec& b, const Mat& C) {
  Mat A = Mat::Zero(6, 9);
  Vec rhs(6);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      A(i, 3 * i + j) = 1.0;      // row sums
      A(3 + j, 3 * i + j) = 1.0;  // column sums
    }
  rhs << a[0], a[1], a[2], b[0], b[1], b[2];

  double best = std::numeric_limits<double>::infinity();
  std::vector<int> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<bool> pick(9, false);
  std::fill(pick.begin(), pick.begin() + 5, true);
  std::sort(pick.begin(), pick.end());
  do {
    std::vector<int> cols;
    for (int c = 0; c < 9; ++c)
      if (pick[c]) cols.push_back(c);
    Mat B(6, 5);
    for (int c = 0; c < 5; ++c) B.col(c) = A.col(cols[c]);
    Vec x = B.colPivHouseholderQr().solve(rhs);
    if ((B * x - rhs).cwiseAbs().maxCoeff() > 1e-10) continue;
    if (x.minCoeff() < -1e-10) continue;
    double cost = 0;
    for (int c = 0; c < 5; ++c)
      cost += x[c] * C(cols[c] / 3, cols[c] % 3);
    best = std::min(best, cost);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

}  // namespace

TEST_CASE("debiased divergence vanishes on identical measures") {
  TriMesh m = generate_disk_mesh(1.0, 0.15);
  Vec density(m.n_vertices());
  for (int i = 0; i < m.n_vertices(); ++i)
    density[i] = 1.0 + 0.5 * std::sin(3.0 * m.vertices(i, 0)) *
                           std::cos(2.0 * m.vertices(i, 1));
  DiscreteMeasure mu = measure_from_density(m, density);
  SinkhornResult r = sinkhorn_w2sq(mu, mu, 1e-2);
  REQUIRE(r.converged);
  CHECK(std::abs(r.value) <= 1e-9);
}

TEST_CASE("two Diracs recover the squared distance at small regularization") {
  DiscreteMeasure mu, nu;
  mu.support = Mat(1, 2);
  mu.support << 0.0, 0.0;
  mu.weights = Vec::Ones(1);
  nu.support = Mat(1, 2);
  nu.support << 0.7, 0.0;
  nu.weights = Vec::Ones(1);
  const double d2 = 0.49;
  SinkhornResult r = sinkhorn_w2sq(mu, nu, 1e-3 * d2);
  REQUIRE(r.converged);
  CHECK(r.value == doctest::Approx(d2).epsilon(0.01));
}

TEST_CASE("divergence is symmetric and nonnegative") {
  Rng rng(41);
  DiscreteMeasure mu = random_measure(rng, 5, 1.0);
  DiscreteMeasure nu = random_measure(rng, 7, 1.0);
  const double eps = 1e-2 * support_diam_sq(mu, nu);
  SinkhornResult ab = sinkhorn_w2sq(mu, nu, eps);
  SinkhornResult ba = sinkhorn_w2sq(nu, mu, eps);
  REQUIRE(ab.converged);
  REQUIRE(ba.converged);
  CHECK(std::abs(ab.value - ba.value) <= 1e-10 * std::max(1.0, ab.value));
  CHECK(ab.value >= -1e-10);
}

TEST_CASE("small regularization matches the exact cost within two percent") {
  Rng rng(2718);
  for (int trial = 0; trial < 10; ++trial) {
    DiscreteMeasure mu = random_measure(rng, 6, 1.0);
    DiscreteMeasure nu = random_measure(rng, 6, 1.0);
    const double eps = 1e-3 * support_diam_sq(mu, nu);
    SinkhornResult r = sinkhorn_w2sq(mu, nu, eps);
    REQUIRE(r.converged);
    const double exact = exact_w2sq_small(mu, nu);
    CHECK(r.value >= -1e-10);
    CHECK(std::abs(r.value - exact) <= 0.02 * std::max(exact, 1e-12));
  }
}

TEST_CASE("divergence approaches the exact cost as regularization shrinks") {
  Rng rng(99);
  DiscreteMeasure mu = random_measure(rng, 5, 1.0);
  DiscreteMeasure nu = random_measure(rng, 6, 1.0);
  const double d2 = support_diam_sq(mu, nu);
  const double exact = exact_w2sq_small(mu, nu);
  double prev_gap = std::numeric_limits<double>::infinity();
  for (double scale : {1e-1, 1e-2, 1e-3}) {
    SinkhornResult r = sinkhorn_w2sq(mu, nu, scale * d2);
    REQUIRE(r.converged);
    const double gap = std::abs(r.value - exact);
    CHECK(gap <= prev_gap + 1e-12);
    prev_gap = gap;
  }
  CHECK(prev_gap <= 0.02 * std::max(exact, 1e-12));
}

TEST_CASE("exact oracle handles degenerate and oversized inputs") {
  Rng rng(7);
  DiscreteMeasure mu = random_measure(rng, 4, 1.0);
  CHECK(exact_w2sq_small(mu, mu) == doctest::Approx(0.0).epsilon(1e-12));

  DiscreteMeasure da, db;
  da.support = Mat(1, 2);
  da.support << -0.2, 0.4;
  da.weights = Vec::Ones(1);
  db.support = Mat(1, 2);
  db.support << 0.5, -0.1;
  db.weights = Vec::Ones(1);
  const double d2 = (da.support.row(0) - db.support.row(0)).squaredNorm();
  CHECK(exact_w2sq_small(da, db) == doctest::Approx(d2).epsilon(1e-12));

  DiscreteMeasure big = random_measure(rng, 13, 1.0);
  CHECK_THROWS_AS(exact_w2sq_small(big, mu), ValidationError);

  Vec bad_a = Vec::Ones(2), bad_b = Vec::Ones(2);
  bad_b[0] = 2.0;  // unbalanced totals
  CHECK_THROWS_AS(exact_w2sq_small(bad_a, bad_b, Mat::Zero(2, 2)),
                  ValidationError);
}

TEST_CASE("transportation simplex agrees with basis enumeration on 3x3") {
  Rng rng(314159);
  for (int trial = 0; trial < 25; ++trial) {
    Vec a(3), b(3);
    for (int i = 0; i < 3; ++i) {
      a[i] = 0.1 + rng.uniform();
      b[i] = 0.1 + rng.uniform();
    }
    a /= a.sum();
    b /= b.sum();
    Mat C(3, 3);
    for (int i = 0; i < 9; ++i) C(i / 3, i % 3) = rng.uniform(0.0, 4.0);
    const double simplex = exact_w2sq_small(a, b, C);
    const double brute = brute_force_3x3(a, b, C);
    CHECK(simplex == doctest::Approx(brute).epsilon(1e-10));
  }
}

TEST_CASE("measure from density: weights, truncation, validation") {
  TriMesh m = generate_disk_mesh(1.0, 0.2);
  FineComplex fine = build_fine_complex(m);
  Vec density = Vec::Zero(m.n_vertices());
  // Positive only on a patch; elsewhere exactly zero.
  for (int i = 0; i < m.n_vertices(); ++i)
    if (m.vertices(i, 0) > 0.2) density[i] = 1.0 + m.vertices(i, 1);

  DiscreteMeasure mu = measure_from_density(m, density);
  CHECK(mu.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mu.weights.minCoeff() > 0.0);
  CHECK(mu.support.rows() < m.n_vertices());
  CHECK(static_cast<int>(mu.nodes.size()) == mu.support.rows());
  // Weights proportional to lumped mass times density.
  for (int r = 0; r < mu.support.rows(); ++r) {
    const int v = mu.nodes[r];
    CHECK(mu.support.row(r) == m.vertices.row(v));
    const double expect = fine.lumped[v] * density[v];
    CHECK(mu.weights[r] * (fine.lumped.dot(density)) ==
          doctest::Approx(expect).epsilon(1e-10));
  }

  DiscreteMeasure full = measure_from_density(m, Vec::Ones(m.n_vertices()), 0.0);
  CHECK(full.support.rows() == m.n_vertices());

  Vec neg = density;
  neg[0] = -1.0;
  CHECK_THROWS_AS(measure_from_density(m, neg), ValidationError);
  CHECK_THROWS_AS(measure_from_density(m, Vec::Zero(m.n_vertices())),
                  ValidationError);
}

TEST_CASE("iteration cap reports a non-converged result instead of lying") {
  Rng rng(5);
  DiscreteMeasure mu = random_measure(rng, 6, 1.0);
  DiscreteMeasure nu = random_measure(rng, 6, 1.0);
  SinkhornResult r =
      sinkhorn_w2sq(mu, nu, 1e-4 * support_diam_sq(mu, nu), 1);
  CHECK_FALSE(r.converged);
  CHECK(r.marginal_error > 1e-9);
}

TEST_CASE("geodesic cost matrix: symmetry, diagonal, convex-domain limit") {
  TriMesh m = generate_disk_mesh(1.0, 0.1);
  Rng rng(12);
  Mat X(4, 2);
  for (int i = 0; i < 4; ++i) {
    const double r = 0.6 * std::sqrt(rng.uniform());
    const double t = rng.uniform(0.0, 6.283185307179586);
    X(i, 0) = r * std::cos(t);
    X(i, 1) = r * std::sin(t);
  }
  Mat self = squared_geodesic_cost_matrix(m, X);
  CHECK((self - self.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(self.diagonal().cwiseAbs().maxCoeff() <= 1e-12);
  Mat euc = squared_cost_matrix(X, X);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      if (i == j) continue;
      // Geodesic on a convex domain equals the straight line up to mesh
      // discretization error.
      CHECK(std::sqrt(self(i, j)) ==
            doctest::Approx(std::sqrt(euc(i, j))).epsilon(0.03));
    }

  Mat cross = squared_geodesic_cost_matrix(m, X, X);
  CHECK((cross - self).cwiseAbs().maxCoeff() <= 0.05);
}
