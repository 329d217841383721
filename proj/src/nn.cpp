#include "cnwf/nn.hpp"

#include <cmath>

#include "cnwf/errors.hpp"

namespace cnwf::nn {

long total_size(const std::vector<ParamSpan>& spans) {
  long n = 0;
  for (const ParamSpan& s : spans) n += s.size;
  return n;
}

void zero_grads(std::vector<ParamSpan>& spans) {
  for (ParamSpan& s : spans)
    Eigen::Map<Vec>(s.grad, s.size).setZero();
}

Vec flatten_values(const std::vector<ParamSpan>& spans) {
  Vec out(total_size(spans));
  long at = 0;
  for (const ParamSpan& s : spans) {
    out.segment(at, s.size) = Eigen::Map<const Vec>(s.value, s.size);
    at += s.size;
  }
  return out;
}

Vec flatten_grads(const std::vector<ParamSpan>& spans) {
  Vec out(total_size(spans));
  long at = 0;
  for (const ParamSpan& s : spans) {
    out.segment(at, s.size) = Eigen::Map<const Vec>(s.grad, s.size);
    at += s.size;
  }
  return out;
}

void unflatten_values(std::vector<ParamSpan>& spans, const Vec& flat) {
  if (flat.size() != total_size(spans))
    throw ValidationError("unflatten_values: length mismatch");
  long at = 0;
  for (ParamSpan& s : spans) {
    Eigen::Map<Vec>(s.value, s.size) = flat.segment(at, s.size);
    at += s.size;
  }
}

void Linear::init(int out_dim, int in_dim, Rng& rng, double scale) {
  const double sd = scale >= 0 ? scale : std::sqrt(2.0 / in_dim);
  W.resize(out_dim, in_dim);
  for (int i = 0; i < out_dim; ++i)
    for (int j = 0; j < in_dim; ++j) W(i, j) = sd * rng.normal();
  b = Vec::Zero(out_dim);
  gW = Mat::Zero(out_dim, in_dim);
  gb = Vec::Zero(out_dim);
}

Mat Linear::forward(const Mat& X) const {
  return (W * X).colwise() + b;
}

Mat Linear::backward(const Mat& X, const Mat& dY) {
  gW.noalias() += dY * X.transpose();
  gb += dY.rowwise().sum();
  return W.transpose() * dY;
}

void Linear::collect(std::vector<ParamSpan>& out) {
  out.push_back({W.data(), gW.data(), W.size()});
  out.push_back({b.data(), gb.data(), b.size()});
}

void Mlp::init(const std::vector<int>& dims, Rng& rng, double last_scale) {
  if (dims.size() < 2) throw ValidationError("Mlp::init: need >= 2 dims");
  layers.resize(dims.size() - 1);
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const bool last = (k + 2 == dims.size());
    layers[k].init(dims[k + 1], dims[k], rng,
                   last && last_scale >= 0 ? last_scale : -1.0);
  }
}

Mat Mlp::forward(const Mat& X, MlpCache* cache) const {
  Mat h = X;
  if (cache) cache->inputs.clear();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (cache) cache->inputs.push_back(h);
    h = layers[k].forward(h);
    if (k + 1 < layers.size()) h = h.cwiseMax(0.0);
  }
  return h;
}

Mat Mlp::backward(const MlpCache& cache, const Mat& dY) {
  if (cache.inputs.size() != layers.size())
    throw ValidationError("Mlp::backward: cache does not match net");
  Mat d = dY;
  for (int k = static_cast<int>(layers.size()) - 1; k >= 0; --k) {
    d = layers[k].backward(cache.inputs[k], d);
    // The stored input of layer k is the post-ReLU output of layer k-1, so
    // its positivity is exactly the activation mask.
    if (k > 0)
      d = d.cwiseProduct(
          (cache.inputs[k].array() > 0.0).cast<double>().matrix());
  }
  return d;
}

Mat Mlp::input_jacobian(const Vec& x, int prefix) const {
  Mat jac = Mat::Zero(x.size(), prefix);
  jac.topLeftCorner(prefix, prefix).setIdentity();
  Vec h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    jac = (layers[k].W * jac).eval();
    h = layers[k].forward(h);
    if (k + 1 < layers.size()) {
      for (Eigen::Index r = 0; r < h.size(); ++r)
        if (h[r] <= 0.0) jac.row(r).setZero();
      h = h.cwiseMax(0.0);
    }
  }
  return jac;
}

void Mlp::collect(std::vector<ParamSpan>& out) {
  for (Linear& l : layers) l.collect(out);
}

void LayerNorm::init(int dim) {
  gamma = Vec::Ones(dim);
  beta = Vec::Zero(dim);
  ggamma = Vec::Zero(dim);
  gbeta = Vec::Zero(dim);
}

Mat LayerNorm::forward(const Mat& X, Cache* cache) const {
  const double n = static_cast<double>(X.rows());
  Mat xhat(X.rows(), X.cols());
  Vec inv_std(X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    const double mean = X.col(c).mean();
    const double var = (X.col(c).array() - mean).square().sum() / n;
    inv_std[c] = 1.0 / std::sqrt(var + 1e-8);
    xhat.col(c) = (X.col(c).array() - mean) * inv_std[c];
  }
  if (cache) {
    cache->xhat = xhat;
    cache->inv_std = inv_std;
  }
  return (xhat.array().colwise() * gamma.array()).colwise() +
         beta.array();
}

Mat LayerNorm::backward(const Cache& cache, const Mat& dY) {
  const double n = static_cast<double>(dY.rows());
  Mat dX(dY.rows(), dY.cols());
  for (Eigen::Index c = 0; c < dY.cols(); ++c) {
    const Vec dxhat = dY.col(c).cwiseProduct(gamma);
    const double s1 = dxhat.sum();
    const double s2 = dxhat.dot(cache.xhat.col(c));
    dX.col(c) = (cache.inv_std[c] / n) *
                (n * dxhat.array() - s1 - cache.xhat.col(c).array() * s2);
    ggamma += dY.col(c).cwiseProduct(cache.xhat.col(c));
    gbeta += dY.col(c);
  }
  return dX;
}

void LayerNorm::collect(std::vector<ParamSpan>& out) {
  out.push_back({gamma.data(), ggamma.data(), gamma.size()});
  out.push_back({beta.data(), gbeta.data(), beta.size()});
}

Mat softmax_columns(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    Vec col = logits.col(c);
    col.array() -= col.maxCoeff();
    col = col.array().exp();
    p.col(c) = col / col.sum();
  }
  return p;
}

Mat softmax_columns_backward(const Mat& p, const Mat& dp) {
  Mat dl(p.rows(), p.cols());
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    const double dot = dp.col(c).dot(p.col(c));
    dl.col(c) = p.col(c).array() * (dp.col(c).array() - dot);
  }
  return dl;
}

void MultiHeadSelfAttention::init(int d_model, int heads, Rng& rng) {
  if (d_model % heads != 0)
    throw ValidationError("attention: model dim must divide by head count");
  n_heads = heads;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
  wq.init(d_model, d_model, rng, sd);
  wk.init(d_model, d_model, rng, sd);
  wv.init(d_model, d_model, rng, sd);
  wo.init(d_model, d_model, rng, sd);
}

Mat MultiHeadSelfAttention::forward(const Mat& X, Cache* cache) const {
  const int d = static_cast<int>(X.rows());
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat Q = wq.forward(X), K = wk.forward(X), V = wv.forward(X);
  Mat concat(d, X.cols());
  std::vector<Mat> att(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const auto Qh = Q.middleRows(h * dh, dh);
    const auto Kh = K.middleRows(h * dh, dh);
    const auto Vh = V.middleRows(h * dh, dh);
    // Row i of the score matrix: token i attending over all tokens.
    Mat scores = scale * (Qh.transpose() * Kh);
    Mat a = softmax_columns(scores.transpose()).transpose();
    concat.middleRows(h * dh, dh) = Vh * a.transpose();
    att[h] = std::move(a);
  }
  if (cache) {
    cache->Q = Q;
    cache->K = K;
    cache->V = V;
    cache->concat = concat;
    cache->att = std::move(att);
  }
  return wo.forward(cache ? cache->concat : concat);
}

Mat MultiHeadSelfAttention::backward(const Mat& X, const Cache& cache,
                                     const Mat& dY) {
  const int d = static_cast<int>(X.rows());
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat dConcat = wo.backward(cache.concat, dY);
  Mat dQ(d, X.cols()), dK(d, X.cols()), dV(d, X.cols());
  for (int h = 0; h < n_heads; ++h) {
    const auto Qh = cache.Q.middleRows(h * dh, dh);
    const auto Kh = cache.K.middleRows(h * dh, dh);
    const auto Vh = cache.V.middleRows(h * dh, dh);
    const Mat& a = cache.att[h];
    const auto dOh = dConcat.middleRows(h * dh, dh);
    dV.middleRows(h * dh, dh) = dOh * a;
    const Mat da = dOh.transpose() * Vh;  // N x dh * ... -> N x N
    const Mat ds =
        softmax_columns_backward(a.transpose(), da.transpose()).transpose();
    dQ.middleRows(h * dh, dh) = scale * (Kh * ds.transpose());
    dK.middleRows(h * dh, dh) = scale * (Qh * ds);
  }
  Mat dX = wq.backward(X, dQ);
  dX += wk.backward(X, dK);
  dX += wv.backward(X, dV);
  return dX;
}

void MultiHeadSelfAttention::collect(std::vector<ParamSpan>& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

void adam_step(std::vector<ParamSpan>& spans, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  const long n = total_size(spans);
  if (state.m.size() != n) {
    state.m = Vec::Zero(n);
    state.v = Vec::Zero(n);
    state.step = 0;
  }
  ++state.step;
  const Vec g = flatten_grads(spans);
  state.m = beta1 * state.m + (1.0 - beta1) * g;
  state.v = beta2 * state.v + (1.0 - beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  long at = 0;
  for (ParamSpan& s : spans) {
    Eigen::Map<Vec> value(s.value, s.size);
    for (Eigen::Index i = 0; i < s.size; ++i) {
      const double mhat = state.m[at + i] / bc1;
      const double vhat = state.v[at + i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    at += s.size;
  }
}

}  // namespace cnwf::nn
