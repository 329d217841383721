/// @file nn.hpp
/// @brief Small dense neural-network blocks with explicit reverse-mode
///        derivatives: linear layers, ReLU MLPs, layer norm, multi-head
///        self-attention, and an Adam optimizer over flat parameter spans.
///
/// Data convention: matrices carry one sample (token, vertex, ...) per
/// COLUMN, so a batch of N vectors of dimension d is d x N. Backward methods
/// accumulate into the layer's grad buffers and return the gradient with
/// respect to their input.
#pragma once

#include <vector>

#include "cnwf/rng.hpp"
#include "cnwf/types.hpp"

namespace cnwf::nn {

/// View of one parameter block and its gradient buffer, both contiguous.
struct ParamSpan {
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;
};

long total_size(const std::vector<ParamSpan>& spans);
void zero_grads(std::vector<ParamSpan>& spans);
Vec flatten_values(const std::vector<ParamSpan>& spans);
Vec flatten_grads(const std::vector<ParamSpan>& spans);
void unflatten_values(std::vector<ParamSpan>& spans, const Vec& flat);

struct Linear {
  Mat W;
  Vec b;
  Mat gW;
  Vec gb;

  /// He-style init for ReLU nets; pass `scale` >= 0 to override the standard
  /// deviation (scale 0 gives exact zeros).
  void init(int out_dim, int in_dim, Rng& rng, double scale = -1.0);
  Mat forward(const Mat& X) const;
  /// Accumulates gW, gb; returns dL/dX.
  Mat backward(const Mat& X, const Mat& dY);
  void collect(std::vector<ParamSpan>& out);
};

struct MlpCache {
  std::vector<Mat> inputs;  ///< input seen by each layer (post-activation)
};

/// Fully connected net with ReLU between layers (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  void init(const std::vector<int>& dims, Rng& rng,
            double last_scale = -1.0);
  Mat forward(const Mat& X, MlpCache* cache = nullptr) const;
  Mat backward(const MlpCache& cache, const Mat& dY);
  /// Jacobian of the output w.r.t. the first `prefix` input coordinates,
  /// evaluated at a single input column.
  Mat input_jacobian(const Vec& x, int prefix) const;
  void collect(std::vector<ParamSpan>& out);
  int in_dim() const { return static_cast<int>(layers.front().W.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().W.rows()); }
};

/// Per-column (per-token) normalization with learned affine.
struct LayerNorm {
  Vec gamma, beta, ggamma, gbeta;

  struct Cache {
    Mat xhat;
    Vec inv_std;
  };

  void init(int dim);
  Mat forward(const Mat& X, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dY);
  void collect(std::vector<ParamSpan>& out);
};

/// Column-wise softmax and its reverse pass (dp is the gradient w.r.t. the
/// probabilities, p the forward result).
Mat softmax_columns(const Mat& logits);
Mat softmax_columns_backward(const Mat& p, const Mat& dp);

/// Scaled dot-product multi-head self-attention over token columns.
struct MultiHeadSelfAttention {
  int n_heads = 1;
  Linear wq, wk, wv, wo;

  struct Cache {
    Mat Q, K, V, concat;
    std::vector<Mat> att;  ///< per head: N x N, rows are attention weights
  };

  void init(int d_model, int heads, Rng& rng);
  Mat forward(const Mat& X, Cache* cache) const;
  Mat backward(const Mat& X, const Cache& cache, const Mat& dY);
  void collect(std::vector<ParamSpan>& out);
};

struct AdamState {
  Vec m, v;
  long step = 0;
};

/// One Adam update over the spans; grads are read, values written in place.
void adam_step(std::vector<ParamSpan>& spans, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

}  // namespace cnwf::nn
