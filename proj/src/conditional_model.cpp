#include "cnwf/conditional_model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <utility>

#include "cnwf/quadrature.hpp"
#include "json.hpp"

namespace cnwf {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization

static json config_json(const ModelConfig& c) {
  json j;
  j["n0c"] = c.n0c;
  j["d_latent"] = c.d_latent;
  j["d_token"] = c.d_token;
  j["n_heads"] = c.n_heads;
  j["encoder_blocks"] = c.encoder_blocks;
  j["use_attention"] = c.use_attention;
  j["token_mlp_depth"] = c.token_mlp_depth;
  j["head_width"] = c.head_width;
  j["head_depth"] = c.head_depth;
  j["d_key"] = c.d_key;
  j["coord_width"] = c.coord_width;
  j["coord_depth"] = c.coord_depth;
  j["flux_gain"] = c.flux_gain;
  j["eps_init"] = c.eps_init;
  j["lambda_ot"] = c.lambda_ot;
  j["sinkhorn_eps_scale"] = c.sinkhorn_eps_scale;
  j["sinkhorn_max_iter"] = c.sinkhorn_max_iter;
  j["geodesic_cost"] = c.geodesic_cost;
  j["newton_tol"] = c.newton_tol;
  j["newton_max_iter"] = c.newton_max_iter;
  j["learning_rate"] = c.learning_rate;
  return j;
}

std::string config_to_json(const ModelConfig& cfg) {
  return config_json(cfg).dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config_from_json: ") + e.what());
  }
  ModelConfig c;
  c.n0c = j.value("n0c", c.n0c);
  c.d_latent = j.value("d_latent", c.d_latent);
  c.d_token = j.value("d_token", c.d_token);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.use_attention = j.value("use_attention", c.use_attention);
  c.token_mlp_depth = j.value("token_mlp_depth", c.token_mlp_depth);
  c.head_width = j.value("head_width", c.head_width);
  c.head_depth = j.value("head_depth", c.head_depth);
  c.d_key = j.value("d_key", c.d_key);
  c.coord_width = j.value("coord_width", c.coord_width);
  c.coord_depth = j.value("coord_depth", c.coord_depth);
  c.flux_gain = j.value("flux_gain", c.flux_gain);
  c.eps_init = j.value("eps_init", c.eps_init);
  c.lambda_ot = j.value("lambda_ot", c.lambda_ot);
  c.sinkhorn_eps_scale = j.value("sinkhorn_eps_scale", c.sinkhorn_eps_scale);
  c.sinkhorn_max_iter = j.value("sinkhorn_max_iter", c.sinkhorn_max_iter);
  c.geodesic_cost = j.value("geodesic_cost", c.geodesic_cost);
  c.newton_tol = j.value("newton_tol", c.newton_tol);
  c.newton_max_iter = j.value("newton_max_iter", c.newton_max_iter);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (c.n0c < 2) throw ValidationError("config: n0c must be at least 2");
  return c;
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  const std::string s = config_to_json(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Encoder

void EncoderCore::collect(std::vector<nn::ParamSpan>& out) {
  token_mlp.collect(out);
  for (auto& blk : blocks) {
    blk.attn.collect(out);
    blk.ln1.collect(out);
    blk.ln2.collect(out);
    blk.mlp.collect(out);
  }
  out.push_back({pool_w.data(), g_pool_w.data(), pool_w.size()});
  to_latent.collect(out);
}

struct BlockTrace {
  Mat in;
  nn::MultiHeadSelfAttention::Cache attn;
  Mat sum1;
  nn::LayerNorm::Cache ln1;
  Mat h1;
  nn::MlpCache mlp;
  Mat sum2;
  nn::LayerNorm::Cache ln2;
};

struct EncoderTrace {
  Mat tokens;
  nn::MlpCache token_cache;
  std::vector<BlockTrace> blocks;
  Mat h;        // final token features
  Vec alpha;    // pooling weights
  Vec pooled;
};

static Mat observation_tokens(const ObservationSet& z) {
  const int n = static_cast<int>(z.sensors.size());
  if (n == 0) throw ValidationError("encode: empty observation set");
  Mat t(5, n);
  for (int i = 0; i < n; ++i) {
    const Observation& s = z.sensors[i];
    t(0, i) = s.position[0];
    t(1, i) = s.position[1];
    t(2, i) = s.u;
    t(3, i) = s.v[0];
    t(4, i) = s.v[1];
  }
  return t;
}

static Vec encoder_forward(const EncoderCore& enc, const ObservationSet& z,
                           EncoderTrace& tr) {
  tr.tokens = observation_tokens(z);
  Mat h = enc.token_mlp.forward(tr.tokens, &tr.token_cache);
  tr.blocks.resize(enc.blocks.size());
  for (size_t b = 0; b < enc.blocks.size(); ++b) {
    const EncoderBlockParams& blk = enc.blocks[b];
    BlockTrace& bt = tr.blocks[b];
    bt.in = h;
    Mat att = blk.attn.forward(h, &bt.attn);
    bt.sum1 = h + att;
    bt.h1 = blk.ln1.forward(bt.sum1, &bt.ln1);
    Mat m = blk.mlp.forward(bt.h1, &bt.mlp);
    bt.sum2 = bt.h1 + m;
    h = blk.ln2.forward(bt.sum2, &bt.ln2);
  }
  tr.h = h;
  // Attention pooling: scalar score per token, softmax, convex combination.
  Vec s = h.transpose() * enc.pool_w;
  s.array() -= s.maxCoeff();
  tr.alpha = s.array().exp();
  tr.alpha /= tr.alpha.sum();
  tr.pooled = h * tr.alpha;
  return enc.to_latent.forward(tr.pooled).col(0);
}

static void encoder_backward(EncoderCore& enc, const EncoderTrace& tr,
                             const Vec& dz) {
  Mat dpooled = enc.to_latent.backward(tr.pooled, dz);
  Mat dh = dpooled * tr.alpha.transpose();
  Vec dalpha = tr.h.transpose() * dpooled.col(0);
  // Softmax over pooling scores.
  const double dot = tr.alpha.dot(dalpha);
  Vec ds = tr.alpha.array() * (dalpha.array() - dot);
  enc.g_pool_w += tr.h * ds;
  dh += enc.pool_w * ds.transpose();
  for (int b = static_cast<int>(enc.blocks.size()) - 1; b >= 0; --b) {
    EncoderBlockParams& blk = enc.blocks[b];
    const BlockTrace& bt = tr.blocks[b];
    Mat dsum2 = blk.ln2.backward(bt.ln2, dh);
    Mat dh1 = dsum2 + blk.mlp.backward(bt.mlp, dsum2);
    Mat dsum1 = blk.ln1.backward(bt.ln1, dh1);
    dh = dsum1 + blk.attn.backward(bt.in, bt.attn, dsum1);
  }
  enc.token_mlp.backward(tr.token_cache, dh);
}

// ---------------------------------------------------------------------------
// Parameter container

std::vector<nn::ParamSpan> ModelParams::spans() {
  std::vector<nn::ParamSpan> out;
  enc.collect(out);
  coord_mlp.collect(out);
  latent_to_keys.collect(out);
  source_mlp.collect(out);
  out.push_back({flux_A.data(), g_flux_A.data(), flux_A.size()});
  out.push_back({flux_B.data(), g_flux_B.data(), flux_B.size()});
  out.push_back({flux_c.data(), g_flux_c.data(), flux_c.size()});
  flux_mlp.collect(out);
  out.push_back({&log_eps, &g_log_eps, 1});
  return out;
}

long ModelParams::n_params() { return nn::total_size(spans()); }

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.n0c < 2) throw ValidationError("init_model: n0c must be at least 2");
  Rng rng(splitmix64(seed ^ 0x6d6f64656cULL));
  ModelParams p;
  p.config = cfg;

  std::vector<int> tdims{5};
  for (int i = 0; i < cfg.token_mlp_depth; ++i) tdims.push_back(cfg.d_token);
  p.enc.token_mlp.init(tdims, rng);
  if (cfg.use_attention) {
    p.enc.blocks.resize(cfg.encoder_blocks);
    for (auto& blk : p.enc.blocks) {
      blk.attn.init(cfg.d_token, cfg.n_heads, rng);
      blk.ln1.init(cfg.d_token);
      blk.ln2.init(cfg.d_token);
      blk.mlp.init({cfg.d_token, cfg.head_width, cfg.d_token}, rng);
    }
  }
  p.enc.pool_w = rng.normal_vec(cfg.d_token) / std::sqrt(double(cfg.d_token));
  p.enc.g_pool_w = Vec::Zero(cfg.d_token);
  p.enc.to_latent.init(cfg.d_latent, cfg.d_token, rng);

  std::vector<int> cdims{2};
  for (int i = 0; i < cfg.coord_depth - 1; ++i) cdims.push_back(cfg.coord_width);
  cdims.push_back(cfg.d_key);
  p.coord_mlp.init(cdims, rng);
  p.latent_to_keys.init((cfg.n0c - 1) * cfg.d_key, cfg.d_latent, rng);

  std::vector<int> sdims{cfg.d_latent};
  for (int i = 0; i < cfg.head_depth - 1; ++i) sdims.push_back(cfg.head_width);
  sdims.push_back(cfg.n0c);
  p.source_mlp.init(sdims, rng);
  // Bias the source away from the all-dead ReLU corner at initialization.
  p.source_mlp.layers.back().b.array() += 0.1;

  const int n1c = coarse_edge_count(cfg.n0c);
  p.flux_A = Mat::Zero(n1c, cfg.n0c);
  p.g_flux_A = Mat::Zero(n1c, cfg.n0c);
  p.flux_B = Mat::Zero(n1c, cfg.d_latent);
  p.g_flux_B = Mat::Zero(n1c, cfg.d_latent);
  p.flux_c = Vec::Zero(n1c);
  p.g_flux_c = Vec::Zero(n1c);
  std::vector<int> fdims{cfg.n0c + cfg.d_latent};
  for (int i = 0; i < cfg.head_depth - 1; ++i) fdims.push_back(cfg.head_width);
  fdims.push_back(n1c);
  // Small last layer: the initial flux is a gentle perturbation of pure
  // diffusion, keeping early Newton solves firmly in the contractive regime.
  p.flux_mlp.init(fdims, rng, 1e-3);

  p.log_eps = std::log(cfg.eps_init);
  return p;
}

// ---------------------------------------------------------------------------
// Heads

Vec encode(const ObservationSet& z, const ModelParams& params) {
  EncoderTrace tr;
  return encoder_forward(params.enc, z, tr);
}

struct PartitionTrace {
  nn::MlpCache coord_cache;
  Mat Q;  // d_key x n0f coordinate queries
  Mat K;  // d_key x (n0c - 1)
  Mat P;  // (n0c - 1) x n0f column softmax (all columns)
};

static ReductionMap partition_forward(const Vec& zhat, const TriMesh& mesh,
                                      const ModelParams& p,
                                      PartitionTrace& tr) {
  const ModelConfig& cfg = p.config;
  const int n0c = cfg.n0c;
  const int n0f = mesh.n_vertices();
  tr.Q = p.coord_mlp.forward(mesh.vertices.transpose(), &tr.coord_cache);
  Vec keys_flat = p.latent_to_keys.forward(zhat).col(0);
  tr.K = Eigen::Map<const Mat>(keys_flat.data(), cfg.d_key, n0c - 1);
  Mat logits = tr.K.transpose() * tr.Q / std::sqrt(double(cfg.d_key));
  tr.P = nn::softmax_columns(logits);

  ReductionMap red;
  red.boundary_row = n0c - 1;
  red.W = Mat::Zero(n0c, n0f);
  for (int v = 0; v < n0f; ++v) {
    if (mesh.vertex_dirichlet[v]) {
      red.W(n0c - 1, v) = 1.0;
    } else {
      red.W.col(v).head(n0c - 1) = tr.P.col(v);
    }
  }
  return red;
}

// Backward of the partition weights into coordinate-MLP, key-map, and latent
// gradients. Hard-assigned boundary columns and the pinned boundary row carry
// no parameters, so only the interior softmax block propagates.
static Vec partition_backward(ModelParams& p, const TriMesh& mesh,
                              const Vec& zhat, const PartitionTrace& tr,
                              const Mat& dW) {
  const ModelConfig& cfg = p.config;
  const int n0c = cfg.n0c;
  const int n0f = static_cast<int>(dW.cols());
  Mat dP = dW.topRows(n0c - 1);
  for (int v = 0; v < n0f; ++v)
    if (mesh.vertex_dirichlet[v]) dP.col(v).setZero();
  Mat dlogits = nn::softmax_columns_backward(tr.P, dP);
  const double scale = 1.0 / std::sqrt(double(cfg.d_key));
  Mat dqueries = scale * (tr.K * dlogits);
  Mat dK = scale * (tr.Q * dlogits.transpose());
  p.coord_mlp.backward(tr.coord_cache, dqueries);
  Vec dkeys_flat = Eigen::Map<const Vec>(dK.data(), dK.size());
  return p.latent_to_keys.backward(zhat, dkeys_flat).col(0);
}

ReductionMap partition_head(const Vec& zhat, const TriMesh& mesh,
                            const ModelParams& params) {
  PartitionTrace tr;
  return partition_forward(zhat, mesh, params, tr);
}

struct SourceTrace {
  nn::MlpCache cache;
  Vec pre;
};

static Vec source_forward(const Vec& zhat, const ModelParams& p,
                          SourceTrace& tr) {
  tr.pre = p.source_mlp.forward(zhat, &tr.cache).col(0);
  return tr.pre.cwiseMax(0.0);
}

static Vec source_backward(ModelParams& p, const SourceTrace& tr,
                           const Vec& df) {
  Vec dpre = (tr.pre.array() > 0.0).select(df, 0.0);
  return p.source_mlp.backward(tr.cache, dpre).col(0);
}

Vec source_head(const Vec& zhat, const ModelParams& params) {
  SourceTrace tr;
  return source_forward(zhat, params, tr);
}

FluxFunction flux_head(const Vec& zhat, const ModelParams& params) {
  const int n0c = params.config.n0c;
  const double alpha = params.config.flux_gain;
  const Mat* A = &params.flux_A;
  const Mat* B = &params.flux_B;
  const Vec* c = &params.flux_c;
  const nn::Mlp* mlp = &params.flux_mlp;
  Vec z = zhat;
  FluxFunction fx;
  fx.eval = [=](const Vec& u) -> Vec {
    Vec in(n0c + z.size());
    in << u, z;
    return (*A) * u + (*B) * z + (*c) + alpha * mlp->forward(in).col(0);
  };
  fx.jacobian = [=](const Vec& u) -> Mat {
    Vec in(n0c + z.size());
    in << u, z;
    return (*A) + alpha * mlp->input_jacobian(in, n0c);
  };
  return fx;
}

// ---------------------------------------------------------------------------
// Density normalization

DensityResult normalize_density(const Vec& fine_source, const TriMesh& mesh,
                                const FineComplex& fine) {
  if (fine_source.size() != mesh.n_vertices())
    throw ValidationError("normalize_density: field size does not match mesh");
  if (fine_source.minCoeff() < -1e-12)
    throw ValidationError("normalize_density: negative source entries");
  Vec s = fine_source.cwiseMax(0.0);
  const double mass = fine.lumped.dot(s);
  DensityResult out;
  if (mass < 1e-12 * mesh.area()) {
    out.rho = Vec::Constant(fine_source.size(), 1.0 / mesh.area());
    out.degenerate = true;
  } else {
    out.rho = s / mass;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pipeline

PredictionBundle cnwf_forward(const ObservationSet& z,
                              const ModelParams& params, const TriMesh& mesh,
                              const FineComplex& fine, double newton_tol) {
  if (newton_tol <= 0) newton_tol = params.config.newton_tol;
  PredictionBundle b;
  b.zhat = encode(z, params);
  b.red = partition_head(b.zhat, mesh, params);
  b.f_hat = source_head(b.zhat, params);
  const CoarseComplex cc = build_coarse_complex(mesh, fine, b.red);
  const FluxFunction flux = flux_head(b.zhat, params);
  const double eps = std::exp(params.log_eps);
  try {
    b.state = solve_reduced(cc, eps, flux, b.f_hat, 0.0,
                            params.config.newton_max_iter, newton_tol);
    b.converged = b.state.converged;
  } catch (const NewtonError& e) {
    b.state.u_hat = e.last_iterate;
    b.state.converged = false;
    b.state.iterations = params.config.newton_max_iter;
    b.state.residual_history = e.residual_history;
    b.converged = false;
  }
  b.u_fine = pullback(b.red, b.state.u_hat);
  b.density = normalize_density(pullback(b.red, b.f_hat), mesh, fine);
  return b;
}

// ---------------------------------------------------------------------------
// Transport context and measures

TransportContext make_transport_context(const TriMesh& mesh,
                                        const ModelConfig& cfg) {
  TransportContext tc;
  if (cfg.geodesic_cost)
    tc.cost = squared_geodesic_cost_matrix(mesh, mesh.vertices);
  else
    tc.cost = squared_cost_matrix(mesh.vertices, mesh.vertices);
  tc.eps_ot = cfg.sinkhorn_eps_scale * tc.cost.maxCoeff();
  tc.max_iter = cfg.sinkhorn_max_iter;
  return tc;
}

// Full-support measure over mesh vertices from a unit-integral density. A
// uniform floor (1e-10 relative mass) keeps every vertex strictly positive so
// the transport gradient stays defined where the prediction is currently
// zero, at a negligible perturbation of the value.
static DiscreteMeasure full_support_measure(const TriMesh& mesh,
                                            const FineComplex& fine,
                                            const Vec& rho, Vec* w_out,
                                            double* T_out) {
  const int n = mesh.n_vertices();
  const double delta = 1e-10;
  Vec w = fine.lumped.cwiseProduct(rho);
  Vec base = (delta / mesh.area()) * fine.lumped;
  const double T = w.sum() + base.sum();
  DiscreteMeasure nu;
  nu.support = mesh.vertices;
  nu.weights = (w + base) / T;
  nu.nodes.resize(n);
  for (int i = 0; i < n; ++i) nu.nodes[i] = i;
  if (w_out) *w_out = nu.weights;
  if (T_out) *T_out = T;
  return nu;
}

static Mat cost_block(const Mat& cost, const std::vector<int>& rows,
                      const std::vector<int>& cols) {
  Mat out(rows.size(), cols.size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < cols.size(); ++j) out(i, j) = cost(rows[i], cols[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

namespace {

struct SampleTrace {
  EncoderTrace enc;
  Vec zhat;
  PartitionTrace part;
  ReductionMap red;
  SourceTrace src;
  Vec f_hat;
  CoarseComplex cc;
  FluxFunction flux;
  double eps = 0;
  NewtonResult state;
  Vec u_fine, s_fine;
  double mass = 0;
  bool degenerate = false;
  Vec rho;
  Vec r;
  double mse = 0, ot = 0;
  SinkhornResult sink;
  Vec nu_weights;
  double nu_T = 1;
};

// Shared forward; returns false when the Newton solve fails (the sample is
// then excluded from the gradient).
bool sample_forward(const SampleTriple& sample, const ModelParams& params,
                    const TriMesh& mesh, const FineComplex& fine,
                    const TransportContext& tc, double newton_tol,
                    int sinkhorn_max_iter, SampleTrace& t) {
  const ModelConfig& cfg = params.config;
  t.zhat = encoder_forward(params.enc, sample.observation, t.enc);
  t.red = partition_forward(t.zhat, mesh, params, t.part);
  t.f_hat = source_forward(t.zhat, params, t.src);
  t.cc = build_coarse_complex(mesh, fine, t.red);
  t.flux = flux_head(t.zhat, params);
  t.eps = std::exp(params.log_eps);
  try {
    t.state = solve_reduced(t.cc, t.eps, t.flux, t.f_hat, 0.0,
                            cfg.newton_max_iter, newton_tol);
  } catch (const NewtonError&) {
    return false;
  }
  t.u_fine = pullback(t.red, t.state.u_hat);
  t.s_fine = pullback(t.red, t.f_hat);
  Vec s = t.s_fine.cwiseMax(0.0);
  t.mass = fine.lumped.dot(s);
  if (t.mass < 1e-12 * mesh.area()) {
    t.degenerate = true;
    t.rho = Vec::Constant(s.size(), 1.0 / mesh.area());
  } else {
    t.degenerate = false;
    t.rho = s / t.mass;
  }

  t.r = t.u_fine - sample.field;
  t.mse = t.r.dot(fine.M0 * t.r);
  t.ot = 0;
  if (cfg.lambda_ot > 0) {
    DiscreteMeasure mu = measure_from_density(mesh, sample.source);
    DiscreteMeasure nu = full_support_measure(mesh, fine, t.rho,
                                              &t.nu_weights, &t.nu_T);
    Mat c_mn = cost_block(tc.cost, mu.nodes, nu.nodes);
    Mat c_mm = cost_block(tc.cost, mu.nodes, mu.nodes);
    t.sink = sinkhorn_w2sq(mu, nu, c_mn, c_mm, tc.cost, tc.eps_ot,
                           sinkhorn_max_iter);
    t.ot = t.sink.value;
  }
  return true;
}

// Reverse pass of build_coarse_complex's M1c assembly: scatter the matrix
// gradient back to the partition weights, triangle by triangle.
void m1c_backward_to_weights(const TriMesh& mesh, const ReductionMap& red,
                             const Mat& dM1c, Mat& dW) {
  const int n0c = static_cast<int>(red.W.rows());
  const int n1c = coarse_edge_count(n0c);
  const QuadratureRule q = triangle_quadrature(4);
  Mat gsym = dM1c + dM1c.transpose();
  Mat Wt(n0c, 3), g3(3, 2), grads(n0c, 2), E(n1c, 2), dE(n1c, 2);
  Mat dgrads(n0c, 2), dWt(n0c, 3);
  Vec psi(n0c), dpsi(n0c);
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    for (int lv = 0; lv < 3; ++lv) {
      Wt.col(lv) = red.W.col(mesh.triangles(t, lv));
      g3.row(lv) = mesh.tri_grad.row(3 * t + lv);
    }
    grads.noalias() = Wt * g3;
    dWt.setZero();
    for (int k = 0; k < q.size(); ++k) {
      psi.noalias() = Wt * q.bary.row(k).transpose();
      const double s = q.w[k] * mesh.tri_area[t];
      for (int e = 0; e < n1c; ++e) {
        const auto [i, j] = coarse_edge_pair(e, n0c);
        E.row(e) = psi[j] * grads.row(i) - psi[i] * grads.row(j);
      }
      dE.noalias() = s * (gsym * E);
      dpsi.setZero();
      dgrads.setZero();
      for (int e = 0; e < n1c; ++e) {
        const auto [i, j] = coarse_edge_pair(e, n0c);
        dpsi[j] += dE.row(e).dot(grads.row(i));
        dgrads.row(i) += psi[j] * dE.row(e);
        dpsi[i] -= dE.row(e).dot(grads.row(j));
        dgrads.row(j) -= psi[i] * dE.row(e);
      }
      dWt.noalias() += dpsi * q.bary.row(k);
      dWt.noalias() += dgrads * g3.transpose();
    }
    for (int lv = 0; lv < 3; ++lv)
      dW.col(mesh.triangles(t, lv)) += dWt.col(lv);
  }
}

void sample_backward(ModelParams& params, const TriMesh& mesh,
                     const FineComplex& fine, const SampleTrace& t) {
  const ModelConfig& cfg = params.config;
  const int n0c = cfg.n0c;
  const int b = t.cc.boundary_row;

  Mat dW = Mat::Zero(n0c, mesh.n_vertices());
  Vec df_hat = Vec::Zero(n0c);
  Vec dzhat = Vec::Zero(cfg.d_latent);

  // Field misfit: u_fine = W^T u_hat.
  Vec gU = 2.0 * (fine.M0 * t.r);
  Vec du_hat = t.red.W * gU;
  dW += t.state.u_hat * gU.transpose();

  // Transport term through the predicted density (envelope theorem on the
  // converged dual potentials, simplex-projected through the floor and the
  // unit-integral normalization).
  if (cfg.lambda_ot > 0 && !t.degenerate) {
    Vec G = cfg.lambda_ot * (t.sink.g - t.sink.p_nu);
    const double mean = t.nu_weights.dot(G);
    Vec drho =
        fine.lumped.cwiseProduct((G.array() - mean).matrix()) / t.nu_T;
    Vec ds = (drho - fine.lumped * drho.dot(t.rho)) / t.mass;
    df_hat += t.red.W * ds;
    dW += t.f_hat * ds.transpose();
  }

  // Implicit-function adjoint through the Newton solve.
  Mat J = reduced_jacobian(t.state.u_hat, t.eps, t.flux, t.cc);
  Eigen::FullPivLU<Mat> lu(J.transpose());
  Vec lam = lu.solve(du_hat);
  lam[b] = 0.0;  // the Dirichlet row of the residual has no parameter terms

  df_hat += t.cc.M0c * lam;
  Vec d0u = t.cc.d0c * t.state.u_hat;
  Vec m1d0u = t.cc.M1c * d0u;
  params.g_log_eps += -lam.dot(t.cc.d0c.transpose() * m1d0u) * t.eps;

  // Flux branch: y_N carries -d(residual)/d(flux output) through the adjoint.
  Vec yN = -(t.cc.M1c * (t.cc.d0c * lam));
  params.g_flux_A += yN * t.state.u_hat.transpose();
  params.g_flux_B += yN * t.zhat.transpose();
  params.g_flux_c += yN;
  {
    Vec in(n0c + cfg.d_latent);
    in << t.state.u_hat, t.zhat;
    nn::MlpCache fc;
    params.flux_mlp.forward(in, &fc);
    Mat din = params.flux_mlp.backward(fc, (cfg.flux_gain * yN).eval());
    // The u_hat block of the input gradient is owned by the implicit-function
    // rule (already inside J); only the latent block is a parameter path.
    dzhat += din.col(0).tail(cfg.d_latent);
  }

  // Mass-matrix paths into the partition weights.
  Mat dM0c = lam * t.f_hat.transpose();
  Vec y = t.eps * d0u + t.flux.eval(t.state.u_hat);
  Mat dM1c = -(t.cc.d0c * lam) * y.transpose();
  Mat WM0 = t.red.W * fine.M0;
  dW += (dM0c + dM0c.transpose()) * WM0;
  m1c_backward_to_weights(mesh, t.red, dM1c, dW);

  dzhat += partition_backward(params, mesh, t.zhat, t.part, dW);
  dzhat += source_backward(params, t.src, df_hat);
  encoder_backward(params.enc, t.enc, dzhat);
}

}  // namespace

bool sample_loss_and_gradients(const SampleTriple& sample, ModelParams& params,
                               const TriMesh& mesh, const FineComplex& fine,
                               const TransportContext& tc, double newton_tol,
                               int sinkhorn_max_iter, LossBreakdown& acc) {
  SampleTrace t;
  if (!sample_forward(sample, params, mesh, fine, tc, newton_tol,
                      sinkhorn_max_iter, t)) {
    acc.excluded += 1;
    return false;
  }
  acc.mse += t.mse;
  acc.ot += t.ot;
  acc.total += t.mse + params.config.lambda_ot * t.ot;
  acc.newton_iters_mean += t.state.iterations;
  if (params.config.lambda_ot > 0) acc.sinkhorn_converged &= t.sink.converged;
  acc.batch += 1;
  sample_backward(params, mesh, fine, t);
  return true;
}

double sample_loss(const SampleTriple& sample, const ModelParams& params,
                   const TriMesh& mesh, const FineComplex& fine,
                   const TransportContext& tc, double newton_tol,
                   int sinkhorn_max_iter) {
  SampleTrace t;
  if (!sample_forward(sample, params, mesh, fine, tc, newton_tol,
                      sinkhorn_max_iter, t))
    throw NumericalError("sample_loss: reduced solve did not converge");
  return t.mse + params.config.lambda_ot * t.ot;
}

LossBreakdown training_step(const std::vector<const SampleTriple*>& batch,
                            ModelParams& params, nn::AdamState& opt,
                            const TriMesh& mesh, const FineComplex& fine,
                            const TransportContext& tc) {
  std::vector<nn::ParamSpan> spans = params.spans();
  nn::zero_grads(spans);
  LossBreakdown out;
  out.eps = std::exp(params.log_eps);
  for (const SampleTriple* s : batch) {
    sample_loss_and_gradients(*s, params, mesh, fine, tc,
                              params.config.newton_tol, tc.max_iter, out);
  }
  if (out.batch == 0) {
    out.skipped = true;
    return out;
  }
  const double inv = 1.0 / out.batch;
  for (auto& sp : spans)
    Eigen::Map<Vec>(sp.grad, sp.size) *= inv;
  out.mse *= inv;
  out.ot *= inv;
  out.total *= inv;
  out.newton_iters_mean *= inv;
  out.grad_norm = nn::flatten_grads(spans).norm();
  nn::adam_step(spans, opt, params.config.learning_rate);
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

std::vector<nn::ParamSpan> BaselineMlp::spans() {
  std::vector<nn::ParamSpan> out;
  mlp.collect(out);
  return out;
}

BaselineMlp init_baseline_mlp(int n_sensors, int n0f, int width, int depth,
                              std::uint64_t seed) {
  if (n_sensors < 1) throw ValidationError("baseline: need at least 1 sensor");
  Rng rng(splitmix64(seed ^ 0x626c6d6cULL));
  BaselineMlp m;
  m.n_sensors = n_sensors;
  std::vector<int> dims{5 * n_sensors};
  for (int i = 0; i < depth - 1; ++i) dims.push_back(width);
  dims.push_back(n0f);
  m.mlp.init(dims, rng);
  m.mlp.layers.back().b.array() += 0.1;
  return m;
}

static Vec baseline_input(const ObservationSet& z, int n_sensors) {
  if (static_cast<int>(z.sensors.size()) != n_sensors)
    throw ValidationError(
        "baseline: observation count does not match the fixed input width");
  Mat t = observation_tokens(z);
  return Eigen::Map<const Vec>(t.data(), t.size());
}

DensityResult baseline_mlp_predict(const BaselineMlp& model,
                                   const ObservationSet& z,
                                   const TriMesh& mesh,
                                   const FineComplex& fine) {
  Vec pre = model.mlp.forward(baseline_input(z, model.n_sensors)).col(0);
  return normalize_density(pre.cwiseMax(0.0), mesh, fine);
}

// Sinkhorn-only loss shared by both baselines: forward the nodal field to a
// density, compare against the sample's source measure, push the envelope
// gradient back through normalization and ReLU.
static double baseline_density_loss_grad(
    const Vec& pre, const SampleTriple& sample, const TriMesh& mesh,
    const FineComplex& fine, const TransportContext& tc, Vec& dpre_out,
    bool& sink_converged) {
  Vec s = pre.cwiseMax(0.0);
  const double mass = fine.lumped.dot(s);
  const bool degenerate = mass < 1e-12 * mesh.area();
  Vec rho = degenerate ? Vec::Constant(s.size(), 1.0 / mesh.area())
                       : Vec(s / mass);
  Vec w;
  double T = 1;
  DiscreteMeasure mu = measure_from_density(mesh, sample.source);
  DiscreteMeasure nu = full_support_measure(mesh, fine, rho, &w, &T);
  Mat c_mn = cost_block(tc.cost, mu.nodes, nu.nodes);
  Mat c_mm = cost_block(tc.cost, mu.nodes, mu.nodes);
  SinkhornResult sink =
      sinkhorn_w2sq(mu, nu, c_mn, c_mm, tc.cost, tc.eps_ot, tc.max_iter);
  sink_converged = sink.converged;
  dpre_out = Vec::Zero(pre.size());
  if (!degenerate) {
    Vec G = sink.g - sink.p_nu;
    const double mean = w.dot(G);
    Vec drho = fine.lumped.cwiseProduct((G.array() - mean).matrix()) / T;
    Vec ds = (drho - fine.lumped * drho.dot(rho)) / mass;
    dpre_out = (pre.array() > 0.0).select(ds, 0.0);
  }
  return sink.value;
}

LossBreakdown baseline_mlp_step(const std::vector<const SampleTriple*>& batch,
                                BaselineMlp& model, nn::AdamState& opt,
                                const TriMesh& mesh, const FineComplex& fine,
                                const TransportContext& tc, double lr) {
  std::vector<nn::ParamSpan> spans = model.spans();
  nn::zero_grads(spans);
  LossBreakdown out;
  for (const SampleTriple* s : batch) {
    nn::MlpCache cache;
    Vec in = baseline_input(s->observation, model.n_sensors);
    Vec pre = model.mlp.forward(in, &cache).col(0);
    Vec dpre;
    bool conv = true;
    double v =
        baseline_density_loss_grad(pre, *s, mesh, fine, tc, dpre, conv);
    out.ot += v;
    out.total += v;
    out.sinkhorn_converged &= conv;
    out.batch += 1;
    model.mlp.backward(cache, dpre);
  }
  const double inv = 1.0 / out.batch;
  for (auto& sp : spans) Eigen::Map<Vec>(sp.grad, sp.size) *= inv;
  out.ot *= inv;
  out.total *= inv;
  out.grad_norm = nn::flatten_grads(spans).norm();
  nn::adam_step(spans, opt, lr);
  return out;
}

std::vector<nn::ParamSpan> BaselineEncoder::spans() {
  std::vector<nn::ParamSpan> out;
  enc.collect(out);
  head.collect(out);
  return out;
}

BaselineEncoder init_baseline_encoder(const ModelConfig& cfg, int n0f,
                                      std::uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x626c656eULL));
  BaselineEncoder m;
  m.config = cfg;
  std::vector<int> tdims{5};
  for (int i = 0; i < cfg.token_mlp_depth; ++i) tdims.push_back(cfg.d_token);
  m.enc.token_mlp.init(tdims, rng);
  if (cfg.use_attention) {
    m.enc.blocks.resize(cfg.encoder_blocks);
    for (auto& blk : m.enc.blocks) {
      blk.attn.init(cfg.d_token, cfg.n_heads, rng);
      blk.ln1.init(cfg.d_token);
      blk.ln2.init(cfg.d_token);
      blk.mlp.init({cfg.d_token, cfg.head_width, cfg.d_token}, rng);
    }
  }
  m.enc.pool_w = rng.normal_vec(cfg.d_token) / std::sqrt(double(cfg.d_token));
  m.enc.g_pool_w = Vec::Zero(cfg.d_token);
  m.enc.to_latent.init(cfg.d_latent, cfg.d_token, rng);
  m.head.init(n0f, cfg.d_latent, rng);
  m.head.b.array() += 0.1;
  return m;
}

DensityResult baseline_encoder_predict(const BaselineEncoder& model,
                                       const ObservationSet& z,
                                       const TriMesh& mesh,
                                       const FineComplex& fine) {
  EncoderTrace tr;
  Vec zhat = encoder_forward(model.enc, z, tr);
  Vec pre = model.head.forward(zhat).col(0);
  return normalize_density(pre.cwiseMax(0.0), mesh, fine);
}

LossBreakdown baseline_encoder_step(
    const std::vector<const SampleTriple*>& batch, BaselineEncoder& model,
    nn::AdamState& opt, const TriMesh& mesh, const FineComplex& fine,
    const TransportContext& tc, double lr) {
  std::vector<nn::ParamSpan> spans = model.spans();
  nn::zero_grads(spans);
  LossBreakdown out;
  for (const SampleTriple* s : batch) {
    EncoderTrace tr;
    Vec zhat = encoder_forward(model.enc, s->observation, tr);
    Vec pre = model.head.forward(zhat).col(0);
    Vec dpre;
    bool conv = true;
    double v =
        baseline_density_loss_grad(pre, *s, mesh, fine, tc, dpre, conv);
    out.ot += v;
    out.total += v;
    out.sinkhorn_converged &= conv;
    out.batch += 1;
    Vec dzhat = model.head.backward(zhat, dpre).col(0);
    encoder_backward(model.enc, tr, dzhat);
  }
  const double inv = 1.0 / out.batch;
  for (auto& sp : spans) Eigen::Map<Vec>(sp.grad, sp.size) *= inv;
  out.ot *= inv;
  out.total *= inv;
  out.grad_norm = nn::flatten_grads(spans).norm();
  nn::adam_step(spans, opt, lr);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(ModelParams& params, const std::string& dir, long step) {
  fs::create_directories(dir);
  std::vector<nn::ParamSpan> spans = params.spans();
  Vec flat = nn::flatten_values(spans);
  {
    std::ofstream out(fs::path(dir) / "params.bin", std::ios::binary);
    if (!out) throw ValidationError("save_checkpoint: cannot write " + dir);
    const char magic[8] = {'C', 'N', 'W', 'F', 'P', 'A', 'R', '1'};
    out.write(magic, 8);
    const std::uint64_t n = static_cast<std::uint64_t>(flat.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
  }
  json manifest;
  manifest["kind"] = "cnwf_model";
  manifest["format"] = 1;
  manifest["step"] = step;
  manifest["param_count"] = flat.size();
  manifest["config_hash"] = config_hash(params.config);
  manifest["config"] = config_json(params.config);
  std::ofstream mout(fs::path(dir) / "manifest.json");
  mout << manifest.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::string& dir, long* step) {
  std::ifstream min(fs::path(dir) / "manifest.json");
  if (!min)
    throw ValidationError("load_checkpoint: missing manifest in " + dir);
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("load_checkpoint: bad manifest: ") +
                          e.what());
  }
  if (manifest.value("kind", "") != "cnwf_model")
    throw ValidationError("load_checkpoint: not a model checkpoint");
  ModelConfig cfg = config_from_json(manifest.at("config").dump());
  ModelParams params = init_model(cfg, 0);
  std::vector<nn::ParamSpan> spans = params.spans();
  const long expect = nn::total_size(spans);

  std::ifstream in(fs::path(dir) / "params.bin", std::ios::binary);
  if (!in)
    throw ValidationError("load_checkpoint: missing params.bin in " + dir);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "CNWFPAR1", 8) != 0)
    throw ValidationError("load_checkpoint: bad parameter file header");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || static_cast<long>(n) != expect)
    throw ValidationError(
        "load_checkpoint: parameter count does not match the config");
  Vec flat(expect);
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw ValidationError("load_checkpoint: truncated parameter file");
  nn::unflatten_values(spans, flat);
  if (step) *step = manifest.value("step", 0L);
  return params;
}

}  // namespace cnwf
