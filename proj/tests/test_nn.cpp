#include "cnwf/nn.hpp"

#include <cmath>
#include <functional>
#include <vector>

#include "cnwf/errors.hpp"
#include "cnwf/rng.hpp"
#include "doctest.h"

using namespace cnwf;
using namespace cnwf::nn;

namespace {

/// Smooth scalar readout of a matrix output, with its gradient.
double readout(const Mat& Y, const Mat& P, Mat* dY = nullptr) {
  const double v = (P.array() * Y.array().tanh()).sum();
  if (dY) *dY = P.array() * (1.0 - Y.array().tanh().square());
  return v;
}

/// Central-difference check of the parameter gradient for a scalar loss.
/// `loss` must evaluate the model fresh from current parameter values;
/// `grads` must hold the analytic gradient (already accumulated).
void check_param_gradient(std::vector<ParamSpan>& spans,
                          const std::function<double()>& loss, Rng& rng,
                          int n_probe, double tol) {
  const Vec g = flatten_grads(spans);
  const Vec base = flatten_values(spans);
  const double h = 1e-6;
  const long n = total_size(spans);
  for (int probe = 0; probe < n_probe; ++probe) {
    const long k = static_cast<long>(rng.uniform_int(static_cast<int>(n)));
    Vec bumped = base;
    bumped[k] += h;
    unflatten_values(spans, bumped);
    const double lp = loss();
    bumped[k] = base[k] - h;
    unflatten_values(spans, bumped);
    const double lm = loss();
    unflatten_values(spans, base);
    const double fd = (lp - lm) / (2.0 * h);
    CHECK(g[k] == doctest::Approx(fd).epsilon(tol).scale(1.0));
  }
}

}  // namespace

TEST_CASE("linear layer gradients match finite differences") {
  Rng rng(101);
  Linear lin;
  lin.init(3, 4, rng);
  Mat X(4, 6), P(3, 6);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  for (int i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();

  std::vector<ParamSpan> spans;
  lin.collect(spans);
  auto loss = [&] { return readout(lin.forward(X), P); };

  zero_grads(spans);
  Mat dY;
  readout(lin.forward(X), P, &dY);
  const Mat dX = lin.backward(X, dY);
  check_param_gradient(spans, loss, rng, 12, 1e-6);

  // Input gradient by the same probe.
  const double h = 1e-6;
  for (int probe = 0; probe < 6; ++probe) {
    const int k = rng.uniform_int(static_cast<int>(X.size()));
    Mat xp = X, xm = X;
    xp.data()[k] += h;
    xm.data()[k] -= h;
    const double fd = (readout(lin.forward(xp), P) - readout(lin.forward(xm), P)) / (2 * h);
    CHECK(dX.data()[k] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("mlp gradients, activation masks, and input jacobian") {
  Rng rng(103);
  Mlp mlp;
  mlp.init({4, 9, 9, 3}, rng);
  Mat X(4, 5), P(3, 5);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  for (int i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();

  std::vector<ParamSpan> spans;
  mlp.collect(spans);
  auto loss = [&] { return readout(mlp.forward(X), P); };

  zero_grads(spans);
  MlpCache cache;
  Mat dY;
  readout(mlp.forward(X, &cache), P, &dY);
  const Mat dX = mlp.backward(cache, dY);
  check_param_gradient(spans, loss, rng, 16, 1e-5);

  const double h = 1e-6;
  for (int probe = 0; probe < 8; ++probe) {
    const int k = rng.uniform_int(static_cast<int>(X.size()));
    Mat xp = X, xm = X;
    xp.data()[k] += h;
    xm.data()[k] -= h;
    const double fd = (readout(mlp.forward(xp), P) - readout(mlp.forward(xm), P)) / (2 * h);
    CHECK(dX.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }

  // Jacobian w.r.t. a prefix of the input coordinates.
  const Vec x0 = X.col(0);
  const Mat jac = mlp.input_jacobian(x0, 2);
  REQUIRE(jac.rows() == 3);
  REQUIRE(jac.cols() == 2);
  for (int c = 0; c < 2; ++c) {
    Vec xp = x0, xm = x0;
    xp[c] += h;
    xm[c] -= h;
    const Vec fd = (mlp.forward(xp) - mlp.forward(xm)) / (2 * h);
    CHECK((jac.col(c) - fd).cwiseAbs().maxCoeff() <= 2e-6);
  }
}

TEST_CASE("layer norm normalizes and differentiates correctly") {
  Rng rng(107);
  LayerNorm ln;
  ln.init(6);
  // Non-trivial affine so the gamma/beta gradients are exercised.
  for (int i = 0; i < 6; ++i) {
    ln.gamma[i] = 0.5 + rng.uniform();
    ln.beta[i] = rng.normal();
  }
  Mat X(6, 4), P(6, 4);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = 2.0 * rng.normal();
  for (int i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();

  LayerNorm::Cache cache;
  const Mat Y = ln.forward(X, &cache);
  // Forward semantics: unit statistics before the affine map.
  for (int c = 0; c < 4; ++c) {
    const Vec xhat = cache.xhat.col(c);
    CHECK(xhat.mean() == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(xhat.squaredNorm() / 6.0 == doctest::Approx(1.0).epsilon(1e-6));
  }

  std::vector<ParamSpan> spans;
  ln.collect(spans);
  auto loss = [&] {
    LayerNorm::Cache c2;
    return readout(ln.forward(X, &c2), P);
  };
  zero_grads(spans);
  Mat dY;
  readout(Y, P, &dY);
  const Mat dX = ln.backward(cache, dY);
  check_param_gradient(spans, loss, rng, 10, 1e-6);

  const double h = 1e-6;
  for (int probe = 0; probe < 8; ++probe) {
    const int k = rng.uniform_int(static_cast<int>(X.size()));
    Mat xp = X, xm = X;
    xp.data()[k] += h;
    xm.data()[k] -= h;
    LayerNorm::Cache c1, c2;
    const double fd =
        (readout(ln.forward(xp, &c1), P) - readout(ln.forward(xm, &c2), P)) /
        (2 * h);
    CHECK(dX.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("column softmax: normalization, uniformity, backward") {
  Rng rng(109);
  Mat logits(5, 3);
  for (int i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal();
  logits.col(1).setConstant(0.7);  // equal scores -> uniform probabilities
  const Mat p = softmax_columns(logits);
  for (int c = 0; c < 3; ++c)
    CHECK(p.col(c).sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK((p.col(1).array() - 0.2).abs().maxCoeff() <= 1e-14);
  CHECK(p.minCoeff() > 0.0);

  Mat P(5, 3);
  for (int i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();
  Mat dp;
  readout(p, P, &dp);
  const Mat dl = softmax_columns_backward(p, dp);
  const double h = 1e-6;
  for (int probe = 0; probe < 8; ++probe) {
    const int k = rng.uniform_int(static_cast<int>(logits.size()));
    Mat lp = logits, lm = logits;
    lp.data()[k] += h;
    lm.data()[k] -= h;
    const double fd =
        (readout(softmax_columns(lp), P) - readout(softmax_columns(lm), P)) /
        (2 * h);
    CHECK(dl.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("multi-head attention: equivariance and gradients") {
  Rng rng(113);
  MultiHeadSelfAttention att;
  att.init(8, 2, rng);
  const int N = 5;
  Mat X(8, N), P(8, N);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  for (int i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();

  // Permutation equivariance: permuting token columns permutes outputs.
  MultiHeadSelfAttention::Cache c0;
  const Mat Y = att.forward(X, &c0);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Mat Xp(8, N);
  for (int c = 0; c < N; ++c) Xp.col(c) = X.col(perm[c]);
  MultiHeadSelfAttention::Cache c1;
  const Mat Yp = att.forward(Xp, &c1);
  for (int c = 0; c < N; ++c)
    CHECK((Yp.col(c) - Y.col(perm[c])).cwiseAbs().maxCoeff() <= 1e-12);

  std::vector<ParamSpan> spans;
  att.collect(spans);
  auto loss = [&] {
    MultiHeadSelfAttention::Cache c;
    return readout(att.forward(X, &c), P);
  };
  zero_grads(spans);
  Mat dY;
  readout(Y, P, &dY);
  const Mat dX = att.backward(X, c0, dY);
  check_param_gradient(spans, loss, rng, 20, 1e-5);

  const double h = 1e-6;
  for (int probe = 0; probe < 10; ++probe) {
    const int k = rng.uniform_int(static_cast<int>(X.size()));
    Mat xp = X, xm = X;
    xp.data()[k] += h;
    xm.data()[k] -= h;
    MultiHeadSelfAttention::Cache ca, cb;
    const double fd =
        (readout(att.forward(xp, &ca), P) - readout(att.forward(xm, &cb), P)) /
        (2 * h);
    CHECK(dX.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("adam converges on a deterministic quadratic") {
  Rng rng(127);
  Vec x(10), g(10);
  Vec target(10);
  for (int i = 0; i < 10; ++i) {
    x[i] = rng.normal();
    target[i] = rng.normal();
  }
  std::vector<ParamSpan> spans = {{x.data(), g.data(), 10}};
  AdamState state;
  double first = (x - target).squaredNorm();
  for (int it = 0; it < 2000; ++it) {
    g = 2.0 * (x - target);
    adam_step(spans, state, 1e-2);
  }
  CHECK((x - target).squaredNorm() < 1e-6 * first);

  // Flatten / unflatten round trip.
  const Vec flat = flatten_values(spans);
  Vec mod = flat;
  mod[3] += 1.5;
  unflatten_values(spans, mod);
  CHECK(x[3] == doctest::Approx(flat[3] + 1.5));
}
