#include "cnwf/forward_fem.hpp"

#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cnwf/errors.hpp"
#include "cnwf/rng.hpp"
#include "json.hpp"

namespace cnwf {

namespace {

double longest_edge(const TriMesh& mesh, int t) {
  double h = 0;
  for (int k = 0; k < 3; ++k) {
    const Vec2 a = mesh.vertex(mesh.triangles(t, k));
    const Vec2 b = mesh.vertex(mesh.triangles(t, (k + 1) % 3));
    h = std::max(h, (a - b).norm());
  }
  return h;
}

/// coth(x) - 1/x, stable near zero (series x/3 - x^3/45 + ...).
double coth_minus_inv(double x) {
  if (x < 1e-4) return x / 3.0;
  return 1.0 / std::tanh(x) - 1.0 / x;
}

}  // namespace

Mat uniform_velocity(const TriMesh& mesh, double angle) {
  Mat v(mesh.n_vertices(), 2);
  v.col(0).setConstant(std::cos(angle));
  v.col(1).setConstant(std::sin(angle));
  return v;
}

Mat velocity_from_stream(const TriMesh& mesh, const Vec& psi) {
  if (psi.size() != mesh.n_vertices())
    throw ValidationError("velocity_from_stream: psi size mismatch");
  Mat v = Mat::Zero(mesh.n_vertices(), 2);
  Vec wsum = Vec::Zero(mesh.n_vertices());
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    Vec2 g = Vec2::Zero();
    for (int k = 0; k < 3; ++k)
      g += psi[mesh.triangles(t, k)] * Vec2(mesh.grad(t, k));
    const double a = mesh.tri_area[t];
    for (int k = 0; k < 3; ++k) {
      const int i = mesh.triangles(t, k);
      v(i, 0) += a * g.y();
      v(i, 1) -= a * g.x();
      wsum[i] += a;
    }
  }
  for (int i = 0; i < mesh.n_vertices(); ++i) v.row(i) /= wsum[i];
  return v;
}

Mat load_velocity_field(const std::string& path, int n_vertices) {
  std::ifstream in(path);
  if (!in)
    throw ValidationError("load_velocity_field: cannot open '" + path + "'");
  Mat v(n_vertices, 2);
  std::string line;
  int lineno = 0, row = 0;
  while (row < n_vertices) {
    if (!std::getline(in, line))
      throw ParseError("expected " + std::to_string(n_vertices) +
                           " velocity rows, got " + std::to_string(row),
                       path, lineno);
    ++lineno;
    std::istringstream ss(line);
    double vx, vy;
    if (!(ss >> vx >> vy))
      throw ParseError("expected 'vx vy'", path, lineno);
    v(row, 0) = vx;
    v(row, 1) = vy;
    ++row;
  }
  return v;
}

void normalize_velocity(Mat& velocity) {
  const double maxn = velocity.rowwise().norm().maxCoeff();
  if (maxn < 1e-300)
    throw ValidationError("normalize_velocity: zero velocity field");
  velocity /= maxn;
}

Cochain0 bump_source(const Vec2& center, double r, const TriMesh& mesh) {
  if (r <= 0) throw ValidationError("bump_source: radius must be positive");
  Cochain0 f = Cochain0::Zero(mesh.n_vertices());
  const double r2 = r * r;
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    const double d2 = (mesh.vertex(i) - center).squaredNorm();
    if (d2 < r2) f[i] = std::exp(-d2 / (r2 - d2));
  }
  return f;
}

std::vector<int> dirichlet_vertices(const TriMesh& mesh,
                                    const ProblemInstance& inst) {
  std::vector<std::uint8_t> neumann(mesh.n_edges(), 0);
  for (int e : inst.neumann_edges) {
    if (e < 0 || e >= mesh.n_edges())
      throw ValidationError("dirichlet_vertices: bad neumann edge id");
    neumann[e] = 1;
  }
  // A boundary vertex stays Dirichlet unless all its boundary edges are
  // Neumann.
  std::vector<std::uint8_t> all_neumann(mesh.n_vertices(), 1);
  for (int e = 0; e < mesh.n_edges(); ++e) {
    if (!mesh.edge_on_boundary[e] || neumann[e]) continue;
    all_neumann[mesh.edges(e, 0)] = 0;
    all_neumann[mesh.edges(e, 1)] = 0;
  }
  std::vector<int> out;
  for (int v = 0; v < mesh.n_vertices(); ++v)
    if (mesh.vertex_dirichlet[v] && !all_neumann[v]) out.push_back(v);
  return out;
}

namespace {

/// Assemble the stabilized system and solve with a direct factorization.
Cochain0 solve_system(const TriMesh& mesh, const FineComplex& fine,
                      const ProblemInstance& inst, const Mat& velocity) {
  const int n = mesh.n_vertices();
  if (inst.peclet <= 0)
    throw ValidationError("solve_advection_diffusion: peclet must be > 0");
  if (inst.source.size() != n || velocity.rows() != n)
    throw ValidationError("solve_advection_diffusion: field size mismatch");

  const std::vector<int> dir = dirichlet_vertices(mesh, inst);
  if (dir.empty())
    throw NumericalError(
        "solve_advection_diffusion: empty Dirichlet set, singular system");
  std::vector<std::uint8_t> is_dir(n, 0);
  for (int v : dir) is_dir[v] = 1;

  Vec rhs = fine.M0 * inst.source;
  std::vector<Trip> trips;
  trips.reserve(static_cast<std::size_t>(mesh.n_triangles()) * 9 + dir.size());
  const double inv_pe = 1.0 / inst.peclet;
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const int i0 = mesh.triangles(t, 0), i1 = mesh.triangles(t, 1),
              i2 = mesh.triangles(t, 2);
    const double at = mesh.tri_area[t];
    const Vec2 vt = (velocity.row(i0) + velocity.row(i1) + velocity.row(i2))
                        .transpose() / 3.0;
    const double nv = vt.norm();
    double tau = 0;
    if (nv > 1e-14) {
      const double h = longest_edge(mesh, t);
      const double pe_t = nv * h * inst.peclet / 2.0;
      tau = h / (2.0 * nv) * coth_minus_inv(pe_t);
    }
    const double fbar =
        (inst.source[i0] + inst.source[i1] + inst.source[i2]) / 3.0;
    const int idx[3] = {i0, i1, i2};
    double vg[3];
    for (int k = 0; k < 3; ++k) vg[k] = vt.dot(Vec2(mesh.grad(t, k)));
    for (int a = 0; a < 3; ++a) {
      if (is_dir[idx[a]]) continue;
      for (int b = 0; b < 3; ++b) {
        const double diff =
            inv_pe * at * Vec2(mesh.grad(t, a)).dot(Vec2(mesh.grad(t, b)));
        const double adv = vg[b] * at / 3.0;
        const double stab = tau * vg[a] * vg[b] * at;
        trips.emplace_back(idx[a], idx[b], diff + adv + stab);
      }
      rhs[idx[a]] += tau * vg[a] * at * fbar;
    }
  }
  // Row replacement: Dirichlet rows carry only the identity; their
  // consistent-load entries in rhs are overwritten by the boundary data.
  for (int v : dir) {
    trips.emplace_back(v, v, 1.0);
    rhs[v] = inst.dirichlet_values.size() == n ? inst.dirichlet_values[v] : 0.0;
  }

  SpMat A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());

  Eigen::SparseLU<SpMat> lu;
  lu.analyzePattern(A);
  lu.factorize(A);
  if (lu.info() != Eigen::Success)
    throw NumericalError(
        "solve_advection_diffusion: direct factorization failed (singular "
        "system)");
  Cochain0 u = lu.solve(rhs);
  if (!u.allFinite())
    throw NumericalError("solve_advection_diffusion: non-finite solution");
  const double denom = std::max(rhs.norm(), 1e-300);
  const double rel = (A * u - rhs).norm() / denom;
  if (rel > 1e-10)
    throw NumericalError(
        "solve_advection_diffusion: residual " + std::to_string(rel) +
        " exceeds tolerance");
  return u;
}

}  // namespace

Cochain0 solve_advection_diffusion(const TriMesh& mesh,
                                   const FineComplex& fine,
                                   const ProblemInstance& inst) {
  return solve_system(mesh, fine, inst, inst.velocity);
}

Cochain0 solve_nonlinear_advection(const TriMesh& mesh,
                                   const FineComplex& fine,
                                   const ProblemInstance& inst,
                                   double threshold, double gain) {
  if (threshold <= 0)
    throw ValidationError("solve_nonlinear_advection: threshold must be > 0");
  const int n = mesh.n_vertices();
  // Start from the pure-diffusion solution.
  Mat v = Mat::Zero(n, 2);
  Cochain0 u = solve_system(mesh, fine, inst, v);
  const int max_iter = 200;
  double damping = 0.6;
  double rel = 0;
  double prev_rel = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    for (int i = 0; i < n; ++i) {
      if (u[i] > threshold)
        v.row(i) = inst.velocity.row(i) * (gain * u[i]);
      else
        v.row(i).setZero();
    }
    const Cochain0 u_solve = solve_system(mesh, fine, inst, v);
    const Cochain0 u_next = u + damping * (u_solve - u);
    rel = (u_next - u).norm() / std::max(u_next.norm(), 1e-300);
    u = u_next;
    if (rel <= 1e-8) return u;
    // The activation switch can drive a limit cycle; shrink the step when
    // the iteration stops contracting.
    if (rel > 0.9 * prev_rel) damping = std::max(0.05, 0.5 * damping);
    prev_rel = rel;
  }
  throw PicardError(
      "solve_nonlinear_advection: Picard stagnation, relative change " +
          std::to_string(rel) + " after " + std::to_string(max_iter) +
          " iterations",
      u);
}

ObservationSet sample_observations(const Cochain0& u,
                                   const ProblemInstance& inst,
                                   const TriMesh& mesh, const Mat& positions,
                                   double noise_std_u, double noise_std_v,
                                   std::uint64_t seed) {
  if (noise_std_u < 0 || noise_std_v < 0)
    throw ValidationError("sample_observations: negative noise std");
  ObservationSet set;
  set.peclet = inst.peclet;
  const double u_scale = u.size() ? u.cwiseAbs().maxCoeff() : 0.0;
  Rng rng(seed);
  for (int i = 0; i < positions.rows(); ++i) {
    const Vec2 p = positions.row(i).transpose();
    const PointLocation loc = locate_point(mesh, p);
    if (!loc.inside)
      throw ValidationError("sample_observations: sensor " +
                            std::to_string(i) + " at (" + std::to_string(p.x()) +
                            ", " + std::to_string(p.y()) +
                            ") is outside the mesh");
    Observation ob;
    ob.position = p;
    ob.u = interpolate(mesh, u, loc);
    ob.v = Vec2(interpolate(mesh, inst.velocity.col(0), loc),
                interpolate(mesh, inst.velocity.col(1), loc));
    ob.u += noise_std_u * u_scale * rng.normal();
    ob.v.x() += noise_std_v * rng.normal();
    ob.v.y() += noise_std_v * rng.normal();
    set.sensors.push_back(ob);
  }
  return set;
}

namespace {

/// Triangles whose vertices all keep the configured boundary clearance,
/// with cumulative areas for uniform sampling.
struct ValidRegion {
  std::vector<int> tris;
  std::vector<double> cum;
  double total = 0;
};

ValidRegion build_valid_region(const TriMesh& mesh, double exclusion) {
  const Vec bdist = boundary_distance_field(mesh);
  ValidRegion r;
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    bool ok = true;
    for (int k = 0; k < 3; ++k)
      ok = ok && bdist[mesh.triangles(t, k)] >= exclusion;
    if (!ok) continue;
    r.tris.push_back(t);
    r.total += mesh.tri_area[t];
    r.cum.push_back(r.total);
  }
  if (r.tris.empty())
    throw ValidationError(
        "generate_dataset: exclusion distance leaves no valid interior");
  return r;
}

Vec2 sample_valid_point(const TriMesh& mesh, const ValidRegion& region,
                        Rng& rng) {
  const double x = rng.uniform() * region.total;
  const auto it = std::lower_bound(region.cum.begin(), region.cum.end(), x);
  const int t = region.tris[std::min<std::size_t>(
      static_cast<std::size_t>(it - region.cum.begin()),
      region.tris.size() - 1)];
  const double s = std::sqrt(rng.uniform());
  const double q = rng.uniform();
  const double b0 = 1.0 - s, b1 = s * (1.0 - q), b2 = s * q;
  return b0 * mesh.vertex(mesh.triangles(t, 0)) +
         b1 * mesh.vertex(mesh.triangles(t, 1)) +
         b2 * mesh.vertex(mesh.triangles(t, 2));
}

SampleTriple generate_sample(const TriMesh& mesh, const FineComplex& fine,
                             const DatasetConfig& config,
                             const ValidRegion& region, std::uint64_t seed) {
  Rng rng(seed);
  ProblemInstance inst;
  inst.peclet =
      config.peclet_min == config.peclet_max
          ? config.peclet_min
          : std::exp(rng.uniform(std::log(config.peclet_min),
                                 std::log(config.peclet_max)));
  if (config.velocity_mode == VelocityMode::kAngle) {
    inst.velocity = uniform_velocity(
        mesh, rng.uniform(config.angle_min, config.angle_max));
  } else {
    if (config.fixed_velocity.rows() != mesh.n_vertices())
      throw ValidationError("generate_dataset: fixed velocity size mismatch");
    inst.velocity = config.fixed_velocity;
    normalize_velocity(inst.velocity);
  }
  const Vec2 center = sample_valid_point(mesh, region, rng);
  Cochain0 f = bump_source(center, config.bump_radius, mesh);
  const double mass = integrate_p1(mesh, f);
  if (mass < 1e-14)
    throw NumericalError(
        "generate_dataset: bump source has no nodal support (radius below "
        "mesh resolution)");
  inst.source = f / mass;
  inst.dirichlet_values = Cochain0::Zero(mesh.n_vertices());

  SampleTriple s;
  s.field = solve_advection_diffusion(mesh, fine, inst);
  s.source = inst.source;
  s.velocity = inst.velocity;
  Mat positions(config.n_sensors, 2);
  for (int i = 0; i < config.n_sensors; ++i)
    positions.row(i) = sample_valid_point(mesh, region, rng).transpose();
  s.observation = sample_observations(s.field, inst, mesh, positions,
                                      config.noise_std_u, config.noise_std_v,
                                      Rng::derive(seed, 0xA11CEULL));
  return s;
}

SampleTriple generate_with_retries(const TriMesh& mesh,
                                   const FineComplex& fine,
                                   const DatasetConfig& config,
                                   const ValidRegion& region,
                                   std::uint64_t seed) {
  for (int attempt = 0;; ++attempt) {
    try {
      return generate_sample(mesh, fine, config, region,
                             Rng::derive(seed, static_cast<std::uint64_t>(attempt)));
    } catch (const std::exception& e) {
      if (attempt >= config.max_retries) throw;
      std::cerr << "dataset: sample attempt " << attempt
                << " failed (" << e.what() << "); retrying\n";
    }
  }
}

}  // namespace

SampleCache generate_dataset(const TriMesh& mesh, const FineComplex& fine,
                             const DatasetConfig& config, std::uint64_t seed) {
  if (config.capacity <= 0)
    throw ValidationError("generate_dataset: capacity must be positive");
  if (config.n_sensors <= 0)
    throw ValidationError("generate_dataset: need at least one sensor");
  const ValidRegion region = build_valid_region(mesh, config.exclusion);
  SampleCache cache;
  cache.capacity = config.capacity;
  cache.refresh_count = config.refresh_count;
  cache.samples.reserve(config.capacity);
  for (int k = 0; k < config.capacity; ++k)
    cache.samples.push_back(generate_with_retries(
        mesh, fine, config, region, Rng::derive(seed, static_cast<std::uint64_t>(k))));
  return cache;
}

void refresh_cache(SampleCache& cache, const TriMesh& mesh,
                   const FineComplex& fine, const DatasetConfig& config,
                   std::uint64_t step_seed) {
  if (cache.refresh_count <= 0) return;
  const int n = static_cast<int>(cache.samples.size());
  const int m = std::min(cache.refresh_count, n);
  const ValidRegion region = build_valid_region(mesh, config.exclusion);
  // Partial Fisher-Yates draw of m distinct slots.
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(step_seed);
  for (int i = 0; i < m; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(idx[i], idx[j]);
  }
  for (int i = 0; i < m; ++i)
    cache.samples[idx[i]] = generate_with_retries(
        mesh, fine, config, region,
        Rng::derive(step_seed, 0x5EEDULL + static_cast<std::uint64_t>(i)));
}

double consistency_error(const Cochain0& predicted_density,
                         const ProblemInstance& inst_true, const TriMesh& mesh,
                         const FineComplex& fine) {
  if (predicted_density.size() != mesh.n_vertices())
    throw ValidationError("consistency_error: density size mismatch");
  Cochain0 pred = predicted_density;
  const double scale = 1.0 + pred.cwiseAbs().maxCoeff();
  for (int i = 0; i < pred.size(); ++i) {
    if (pred[i] < -1e-9 * scale)
      throw ValidationError("consistency_error: negative predicted density");
    pred[i] = std::max(pred[i], 0.0);
  }
  const double mass_pred = integrate_p1(mesh, pred);
  if (mass_pred <= 1e-14)
    throw ValidationError("consistency_error: predicted density has no mass");

  ProblemInstance inst_pred = inst_true;
  inst_pred.source = pred / mass_pred;
  ProblemInstance inst_ref = inst_true;
  const double mass_true = integrate_p1(mesh, inst_true.source);
  if (mass_true <= 1e-14)
    throw ValidationError("consistency_error: true source has no mass");
  inst_ref.source = inst_true.source / mass_true;

  const Cochain0 u_pred = solve_advection_diffusion(mesh, fine, inst_pred);
  const Cochain0 u_true = solve_advection_diffusion(mesh, fine, inst_ref);
  const Vec diff = u_pred - u_true;
  const double num = std::sqrt(diff.dot(fine.M0 * diff));
  const double den = std::sqrt(u_true.dot(fine.M0 * u_true));
  if (den <= 1e-300)
    throw NumericalError("consistency_error: reference field has zero norm");
  return num / den;
}

namespace {

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n,
                const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in)
    throw ValidationError("load_sample_cache: truncated sample file '" + path +
                          "'");
}

constexpr std::uint64_t kSampleMagic = 0x31504d5346574e43ull;  // "CNWFSMP1"

void save_sample(const SampleTriple& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw ValidationError("save_sample_cache: cannot open '" + path + "'");
  write_bytes(out, &kSampleMagic, 8);
  const std::int32_t ns = static_cast<std::int32_t>(s.observation.sensors.size());
  const std::int32_t n0 = static_cast<std::int32_t>(s.field.size());
  write_bytes(out, &ns, 4);
  write_bytes(out, &n0, 4);
  write_bytes(out, &s.observation.peclet, 8);
  for (const Observation& ob : s.observation.sensors) {
    const double rec[5] = {ob.position.x(), ob.position.y(), ob.u, ob.v.x(),
                           ob.v.y()};
    write_bytes(out, rec, sizeof(rec));
  }
  write_bytes(out, s.field.data(), sizeof(double) * s.field.size());
  write_bytes(out, s.source.data(), sizeof(double) * s.source.size());
  Mat vel = s.velocity;
  write_bytes(out, vel.data(), sizeof(double) * vel.size());
}

SampleTriple load_sample(const std::string& path, int n_vertices) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ValidationError("load_sample_cache: cannot open '" + path + "'");
  std::uint64_t magic = 0;
  read_bytes(in, &magic, 8, path);
  if (magic != kSampleMagic)
    throw ValidationError("load_sample_cache: bad magic in '" + path + "'");
  std::int32_t ns = 0, n0 = 0;
  read_bytes(in, &ns, 4, path);
  read_bytes(in, &n0, 4, path);
  if (n0 != n_vertices)
    throw ValidationError("load_sample_cache: sample '" + path +
                          "' was generated on a different mesh");
  SampleTriple s;
  read_bytes(in, &s.observation.peclet, 8, path);
  s.observation.sensors.resize(ns);
  for (Observation& ob : s.observation.sensors) {
    double rec[5];
    read_bytes(in, rec, sizeof(rec), path);
    ob.position = Vec2(rec[0], rec[1]);
    ob.u = rec[2];
    ob.v = Vec2(rec[3], rec[4]);
  }
  s.field.resize(n0);
  s.source.resize(n0);
  s.velocity.resize(n0, 2);
  read_bytes(in, s.field.data(), sizeof(double) * n0, path);
  read_bytes(in, s.source.data(), sizeof(double) * n0, path);
  read_bytes(in, s.velocity.data(), sizeof(double) * 2 * n0, path);
  return s;
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void save_sample_cache(const SampleCache& cache, const std::string& dir,
                       const TriMesh& mesh, const DatasetConfig& config,
                       std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["mesh_hash"] = hash_hex(mesh_hash(mesh));
  manifest["seed"] = std::to_string(seed);
  manifest["capacity"] = cache.capacity;
  manifest["refresh_count"] = cache.refresh_count;
  manifest["config"] = {
      {"n_sensors", config.n_sensors},
      {"noise_std_u", config.noise_std_u},
      {"noise_std_v", config.noise_std_v},
      {"bump_radius", config.bump_radius},
      {"exclusion", config.exclusion},
      {"peclet_min", config.peclet_min},
      {"peclet_max", config.peclet_max},
      {"velocity_mode",
       config.velocity_mode == VelocityMode::kAngle ? "angle" : "fixed"},
      {"angle_min", config.angle_min},
      {"angle_max", config.angle_max},
  };
  std::vector<std::string> files;
  for (std::size_t k = 0; k < cache.samples.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%06zu.bin", k);
    files.emplace_back(name);
    save_sample(cache.samples[k], (fs::path(dir) / name).string());
  }
  manifest["samples"] = files;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out)
    throw ValidationError("save_sample_cache: cannot write manifest in '" +
                          dir + "'");
  out << manifest.dump(2) << "\n";
}

SampleCache load_sample_cache(const std::string& dir, const TriMesh& mesh) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in)
    throw ValidationError("load_sample_cache: no manifest in '" + dir + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_sample_cache: bad manifest: " +
                          std::string(e.what()));
  }
  if (manifest.value("mesh_hash", "") != hash_hex(mesh_hash(mesh)))
    throw ValidationError(
        "load_sample_cache: manifest mesh hash does not match this mesh");
  SampleCache cache;
  cache.capacity = manifest.value("capacity", 0);
  cache.refresh_count = manifest.value("refresh_count", 0);
  for (const auto& name : manifest.at("samples"))
    cache.samples.push_back(load_sample(
        (fs::path(dir) / name.get<std::string>()).string(), mesh.n_vertices()));
  return cache;
}

}  // namespace cnwf
