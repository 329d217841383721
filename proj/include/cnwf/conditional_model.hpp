/// @file conditional_model.hpp
/// @brief Conditional reduced model: a permutation-invariant sensor encoder
///        conditions partition, source, and flux heads; the resulting coarse
///        conservation system is solved by Newton and pulled back to the fine
///        mesh as a source-location density.
///
/// Training minimizes
///   L = || W^T u_hat - u_true ||^2_{M0} + lambda_ot * S(rho_true, rho_pred)
/// with S the debiased Sinkhorn divergence. Gradients flow through the
/// converged Newton solve by the implicit-function rule (one adjoint solve
/// against the final Jacobian), through both mass matrices into the partition
/// weights, and through the measure construction into the source head.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnwf/forward_fem.hpp"
#include "cnwf/nn.hpp"
#include "cnwf/reduced_rom.hpp"
#include "cnwf/transport.hpp"

namespace cnwf {

struct ModelConfig {
  int n0c = 5;             ///< partitions, one pinned to the boundary
  int d_latent = 64;
  int d_token = 32;
  int n_heads = 4;
  int encoder_blocks = 2;  ///< self-attention blocks (used when enabled)
  bool use_attention = false;
  int token_mlp_depth = 2;
  int head_width = 128;
  int head_depth = 6;
  int d_key = 16;          ///< partition cross-attention key width
  int coord_width = 32;
  int coord_depth = 2;
  double flux_gain = 0.1;  ///< alpha on the nonlinear flux branch
  double eps_init = 1e-3;  ///< initial diffusivity (typical 1/Pe)
  double lambda_ot = 1.0;
  double sinkhorn_eps_scale = 1e-2;  ///< times squared domain diameter
  int sinkhorn_max_iter = 200;
  bool geodesic_cost = false;
  double newton_tol = 1e-8;
  int newton_max_iter = 30;
  double learning_rate = 1e-3;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);
std::uint64_t config_hash(const ModelConfig& cfg);

/// Deep-set / transformer encoder shared by the conditional model and the
/// encoder baseline: per-sensor token MLP, optional self-attention blocks,
/// attention pooling, and a linear map to the latent code.
struct EncoderBlockParams {
  nn::MultiHeadSelfAttention attn;
  nn::LayerNorm ln1, ln2;
  nn::Mlp mlp;
};

struct EncoderCore {
  nn::Mlp token_mlp;
  std::vector<EncoderBlockParams> blocks;
  Vec pool_w, g_pool_w;
  nn::Linear to_latent;

  void collect(std::vector<nn::ParamSpan>& out);
};

struct EncoderTrace;  // internal caches, defined in the implementation

/// Full trainable parameter set.
struct ModelParams {
  ModelConfig config;
  EncoderCore enc;
  nn::Mlp coord_mlp;          ///< vertex coordinates -> attention queries
  nn::Linear latent_to_keys;  ///< latent -> (n0c-1) keys
  nn::Mlp source_mlp;
  Mat flux_A, g_flux_A;       ///< linear flux branch on u_hat
  Mat flux_B, g_flux_B;       ///< linear flux branch on the latent
  Vec flux_c, g_flux_c;
  nn::Mlp flux_mlp;
  double log_eps = 0, g_log_eps = 0;  ///< diffusivity, positively
                                      ///< reparameterized as exp(log_eps)

  std::vector<nn::ParamSpan> spans();
  long n_params();
};

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Latent code for an observation set; order-invariant across sensors.
Vec encode(const ObservationSet& z, const ModelParams& params);

/// Column-stochastic partition weights: softmax over the trainable rows on
/// interior nodes (cross-attention scores between coordinate queries and
/// latent-conditioned keys); Dirichlet-tagged nodes are hard-assigned to the
/// last row.
ReductionMap partition_head(const Vec& zhat, const TriMesh& mesh,
                            const ModelParams& params);

/// Nonnegative coarse source coefficients (final ReLU).
Vec source_head(const Vec& zhat, const ModelParams& params);

/// Coarse-edge flux closure at a fixed latent: linear skip plus gain-scaled
/// MLP branch, with the analytic Jacobian in u_hat.
FluxFunction flux_head(const Vec& zhat, const ModelParams& params);

struct DensityResult {
  Vec rho;
  bool degenerate = false;  ///< integral below floor; uniform returned
};

/// Unit-integral density from a nonnegative nodal field. Integrals below
/// 1e-12 * |Omega| return the uniform density with the degenerate flag set.
DensityResult normalize_density(const Vec& fine_source, const TriMesh& mesh,
                                const FineComplex& fine);

struct PredictionBundle {
  Vec zhat;
  ReductionMap red;
  Vec f_hat;
  NewtonResult state;
  Vec u_fine;             ///< pulled-back field W^T u_hat
  DensityResult density;  ///< normalized pulled-back source
  bool converged = false;
};

/// Full conditional pipeline. A Newton failure is caught and returned as a
/// non-converged bundle holding the last iterate.
PredictionBundle cnwf_forward(const ObservationSet& z,
                              const ModelParams& params, const TriMesh& mesh,
                              const FineComplex& fine,
                              double newton_tol = -1.0);

/// Precomputed vertex-pair transport costs for the training loss (Euclidean
/// or geodesic, per config), with the entropic scale derived from the
/// squared domain diameter.
struct TransportContext {
  Mat cost;  ///< n0f x n0f squared distances
  double eps_ot = 0;
  int max_iter = 200;
};

TransportContext make_transport_context(const TriMesh& mesh,
                                        const ModelConfig& cfg);

struct LossBreakdown {
  double total = 0, mse = 0, ot = 0;
  int batch = 0;
  int excluded = 0;  ///< non-converged forward solves skipped
  double newton_iters_mean = 0;
  bool sinkhorn_converged = true;
  double grad_norm = 0;
  double eps = 0;  ///< current diffusivity
  bool skipped = false;  ///< whole step skipped (all samples excluded)
};

/// Loss and parameter gradients for one sample, accumulated into the grad
/// buffers of `params`. Throws NewtonError through to the caller only when
/// `newton_tol` demands an exact solve; otherwise failures surface as
/// `converged == false` with no gradient contribution.
bool sample_loss_and_gradients(const SampleTriple& sample, ModelParams& params,
                               const TriMesh& mesh, const FineComplex& fine,
                               const TransportContext& tc, double newton_tol,
                               int sinkhorn_max_iter, LossBreakdown& acc);

/// Loss only (no gradients), same code path as the gradient version.
double sample_loss(const SampleTriple& sample, const ModelParams& params,
                   const TriMesh& mesh, const FineComplex& fine,
                   const TransportContext& tc, double newton_tol,
                   int sinkhorn_max_iter);

/// One optimizer step over a batch: zero grads, accumulate per-sample
/// gradients (skipping non-converged solves), average, Adam update.
LossBreakdown training_step(const std::vector<const SampleTriple*>& batch,
                            ModelParams& params, nn::AdamState& opt,
                            const TriMesh& mesh, const FineComplex& fine,
                            const TransportContext& tc);

/// Direct-regression baseline with a fixed sensor count: flattened sensor
/// tuples through an MLP to a nodal field, ReLU, normalized.
struct BaselineMlp {
  int n_sensors = 0;
  nn::Mlp mlp;
  std::vector<nn::ParamSpan> spans();
};

BaselineMlp init_baseline_mlp(int n_sensors, int n0f, int width, int depth,
                              std::uint64_t seed);
DensityResult baseline_mlp_predict(const BaselineMlp& model,
                                   const ObservationSet& z,
                                   const TriMesh& mesh,
                                   const FineComplex& fine);
LossBreakdown baseline_mlp_step(const std::vector<const SampleTriple*>& batch,
                                BaselineMlp& model, nn::AdamState& opt,
                                const TriMesh& mesh, const FineComplex& fine,
                                const TransportContext& tc, double lr);

/// Encoder baseline: the same permutation-invariant encoder followed by a
/// linear nodal head; accepts any sensor count.
struct BaselineEncoder {
  ModelConfig config;  ///< encoder dims reused; heads ignored
  EncoderCore enc;
  nn::Linear head;
  std::vector<nn::ParamSpan> spans();
};

BaselineEncoder init_baseline_encoder(const ModelConfig& cfg, int n0f,
                                      std::uint64_t seed);
DensityResult baseline_encoder_predict(const BaselineEncoder& model,
                                       const ObservationSet& z,
                                       const TriMesh& mesh,
                                       const FineComplex& fine);
LossBreakdown baseline_encoder_step(
    const std::vector<const SampleTriple*>& batch, BaselineEncoder& model,
    nn::AdamState& opt, const TriMesh& mesh, const FineComplex& fine,
    const TransportContext& tc, double lr);

/// Checkpoints: binary parameter blob plus a JSON manifest with dimensions,
/// config hash, and training step.
void save_checkpoint(ModelParams& params, const std::string& dir, long step);
ModelParams load_checkpoint(const std::string& dir, long* step = nullptr);

}  // namespace cnwf
