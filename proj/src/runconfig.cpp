#include "cnwf/runconfig.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cnwf/errors.hpp"
#include "json.hpp"

namespace cnwf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  return v;
}

struct ConfigEntry {
  std::string key;  ///< "section.key"
  std::string value;
  int lineno = 0;
};

/// File-order "section.key" entries from the TOML-style file; later
/// duplicates override earlier ones when applied in order.
std::vector<ConfigEntry> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file not found: " + path);
  std::vector<ConfigEntry> entries;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ValidationError(path + ":" + std::to_string(lineno) +
                              ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) +
                            ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = unquote(trim(line.substr(eq + 1)));
    if (key.empty())
      throw ValidationError(path + ":" + std::to_string(lineno) + ": empty key");
    entries.push_back({section.empty() ? key : section + "." + key, val, lineno});
  }
  return entries;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config key " + key + ": not a number: " + v);
  }
}

int to_int(const std::string& key, const std::string& v) {
  const double x = to_double(key, v);
  const int i = static_cast<int>(std::lround(x));
  if (std::abs(x - i) > 1e-9)
    throw ValidationError("config key " + key + ": not an integer: " + v);
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError("config key " + key + ": not a boolean: " + v);
}

std::vector<int> to_int_list(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']')
      throw ValidationError("config key " + key + ": unterminated list");
    v = v.substr(1, v.size() - 2);
  }
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int(key, item));
  }
  return out;
}

void apply_entry(RunConfig& c, const std::string& key, const std::string& v) {
  ModelConfig& m = c.model;
  if (key == "mesh.kind") c.mesh_kind = v;
  else if (key == "mesh.radius") c.mesh_radius = to_double(key, v);
  else if (key == "mesh.h") c.mesh_h = to_double(key, v);
  else if (key == "mesh.x0") c.rect_x0 = to_double(key, v);
  else if (key == "mesh.y0") c.rect_y0 = to_double(key, v);
  else if (key == "mesh.x1") c.rect_x1 = to_double(key, v);
  else if (key == "mesh.y1") c.rect_y1 = to_double(key, v);
  else if (key == "mesh.hole") c.hole = to_bool(key, v);
  else if (key == "mesh.hole_x0") c.hole_x0 = to_double(key, v);
  else if (key == "mesh.hole_y0") c.hole_y0 = to_double(key, v);
  else if (key == "mesh.hole_x1") c.hole_x1 = to_double(key, v);
  else if (key == "mesh.hole_y1") c.hole_y1 = to_double(key, v);
  else if (key == "mesh.file") c.mesh_file = v;
  else if (key == "physics.peclet_min") c.peclet_min = to_double(key, v);
  else if (key == "physics.peclet_max") c.peclet_max = to_double(key, v);
  else if (key == "physics.velocity_mode") c.velocity_mode = v;
  else if (key == "physics.angle_min") c.angle_min = to_double(key, v);
  else if (key == "physics.angle_max") c.angle_max = to_double(key, v);
  else if (key == "physics.fixed_vx") c.fixed_vx = to_double(key, v);
  else if (key == "physics.fixed_vy") c.fixed_vy = to_double(key, v);
  else if (key == "physics.bump_radius") c.bump_radius = to_double(key, v);
  else if (key == "physics.exclusion") c.exclusion = to_double(key, v);
  else if (key == "sensors.n") c.n_sensors = to_int(key, v);
  else if (key == "sensors.noise_u") c.noise_u = to_double(key, v);
  else if (key == "sensors.noise_v") c.noise_v = to_double(key, v);
  else if (key == "dataset.capacity") c.capacity = to_int(key, v);
  else if (key == "dataset.refresh_count") c.refresh_count = to_int(key, v);
  else if (key == "dataset.dir") c.dataset_dir = v;
  else if (key == "model.n0c") m.n0c = to_int(key, v);
  else if (key == "model.d_latent") m.d_latent = to_int(key, v);
  else if (key == "model.d_token") m.d_token = to_int(key, v);
  else if (key == "model.n_heads") m.n_heads = to_int(key, v);
  else if (key == "model.encoder_blocks") m.encoder_blocks = to_int(key, v);
  else if (key == "model.use_attention") m.use_attention = to_bool(key, v);
  else if (key == "model.token_mlp_depth") m.token_mlp_depth = to_int(key, v);
  else if (key == "model.head_width") m.head_width = to_int(key, v);
  else if (key == "model.head_depth") m.head_depth = to_int(key, v);
  else if (key == "model.d_key") m.d_key = to_int(key, v);
  else if (key == "model.coord_width") m.coord_width = to_int(key, v);
  else if (key == "model.coord_depth") m.coord_depth = to_int(key, v);
  else if (key == "model.flux_gain") m.flux_gain = to_double(key, v);
  else if (key == "model.eps_init") m.eps_init = to_double(key, v);
  else if (key == "model.lambda_ot") m.lambda_ot = to_double(key, v);
  else if (key == "model.sinkhorn_eps_scale") m.sinkhorn_eps_scale = to_double(key, v);
  else if (key == "model.sinkhorn_max_iter") m.sinkhorn_max_iter = to_int(key, v);
  else if (key == "model.geodesic_cost") m.geodesic_cost = to_bool(key, v);
  else if (key == "model.newton_tol") m.newton_tol = to_double(key, v);
  else if (key == "model.newton_max_iter") m.newton_max_iter = to_int(key, v);
  else if (key == "model.learning_rate") m.learning_rate = to_double(key, v);
  else if (key == "train.steps") c.steps = to_int(key, v);
  else if (key == "train.batch") c.batch = to_int(key, v);
  else if (key == "train.checkpoint_every") c.checkpoint_every = to_int(key, v);
  else if (key == "train.refresh_every") c.refresh_every = to_int(key, v);
  else if (key == "train.baseline") c.baseline = v;
  else if (key == "train.baseline_width") c.baseline_width = to_int(key, v);
  else if (key == "train.baseline_depth") c.baseline_depth = to_int(key, v);
  else if (key == "eval.samples") c.eval_samples = to_int(key, v);
  else if (key == "eval.sweep_min") c.sweep_min = to_int(key, v);
  else if (key == "eval.sweep_max") c.sweep_max = to_int(key, v);
  else if (key == "eval.sweep") c.sweep = to_bool(key, v);
  else if (key == "coverage.K") c.cov_K = to_int(key, v);
  else if (key == "coverage.m") c.cov_m = to_int(key, v);
  else if (key == "coverage.alpha") c.cov_alpha = to_double(key, v);
  else if (key == "coverage.schedule") c.schedule = to_int_list(key, v);
  else if (key == "coverage.trials") c.trials = to_int(key, v);
  else if (key == "coverage.safeguard") c.safeguard = to_bool(key, v);
  else if (key == "coverage.distance_mode") c.distance_mode = v;
  else if (key == "coverage.r_prime") c.r_prime = to_double(key, v);
  else if (key == "coverage.r_target") c.r_target = to_double(key, v);
  else if (key == "coverage.horizon") c.horizon = to_double(key, v);
  else if (key == "coverage.x_star_x") c.x_star_x = to_double(key, v);
  else if (key == "coverage.x_star_y") c.x_star_y = to_double(key, v);
  else if (key == "run.seed") c.seed = static_cast<std::uint64_t>(to_double(key, v));
  else if (key == "run.out_dir") c.out_dir = v;
  else throw ValidationError("unknown config key: " + key);
}

}  // namespace

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    for (const ConfigEntry& e : parse_kv_file(path)) {
      try {
        apply_entry(cfg, e.key, e.value);
      } catch (const ValidationError& err) {
        throw ValidationError(path + ":" + std::to_string(e.lineno) + ": " +
                              err.what());
      }
    }
  }
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ValidationError("override must be section.key=value: " + ov);
    apply_entry(cfg, trim(ov.substr(0, eq)), unquote(trim(ov.substr(eq + 1))));
  }
  return cfg;
}

std::string run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["mesh"] = {{"kind", c.mesh_kind},   {"radius", c.mesh_radius},
               {"h", c.mesh_h},         {"x0", c.rect_x0},
               {"y0", c.rect_y0},       {"x1", c.rect_x1},
               {"y1", c.rect_y1},       {"hole", c.hole},
               {"hole_x0", c.hole_x0},  {"hole_y0", c.hole_y0},
               {"hole_x1", c.hole_x1},  {"hole_y1", c.hole_y1},
               {"file", c.mesh_file}};
  j["physics"] = {{"peclet_min", c.peclet_min},
                  {"peclet_max", c.peclet_max},
                  {"velocity_mode", c.velocity_mode},
                  {"angle_min", c.angle_min},
                  {"angle_max", c.angle_max},
                  {"fixed_vx", c.fixed_vx},
                  {"fixed_vy", c.fixed_vy},
                  {"bump_radius", c.bump_radius},
                  {"exclusion", c.exclusion}};
  j["sensors"] = {{"n", c.n_sensors}, {"noise_u", c.noise_u}, {"noise_v", c.noise_v}};
  j["dataset"] = {{"capacity", c.capacity},
                  {"refresh_count", c.refresh_count},
                  {"dir", c.dataset_dir}};
  j["model"] = nlohmann::ordered_json::parse(config_to_json(c.model));
  j["train"] = {{"steps", c.steps},
                {"batch", c.batch},
                {"checkpoint_every", c.checkpoint_every},
                {"refresh_every", c.refresh_every},
                {"baseline", c.baseline},
                {"baseline_width", c.baseline_width},
                {"baseline_depth", c.baseline_depth}};
  j["eval"] = {{"samples", c.eval_samples},
               {"sweep_min", c.sweep_min},
               {"sweep_max", c.sweep_max},
               {"sweep", c.sweep}};
  j["coverage"] = {{"K", c.cov_K},
                   {"m", c.cov_m},
                   {"alpha", c.cov_alpha},
                   {"schedule", c.schedule},
                   {"trials", c.trials},
                   {"safeguard", c.safeguard},
                   {"distance_mode", c.distance_mode},
                   {"r_prime", c.r_prime},
                   {"r_target", c.r_target},
                   {"horizon", c.horizon},
                   {"x_star_x", c.x_star_x},
                   {"x_star_y", c.x_star_y}};
  // Seed echoes as a string: 64-bit values stay exact for any JSON consumer.
  j["run"] = {{"seed", std::to_string(c.seed)}, {"out_dir", c.out_dir}};
  return j.dump(2);
}

std::uint64_t run_config_hash(const RunConfig& cfg) {
  const std::string s = run_config_json(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string resolve_out_dir(const RunConfig& cfg) {
  if (!cfg.out_dir.empty() && cfg.out_dir.front() == '/') return cfg.out_dir;
  const char* root = std::getenv("CNWF_OUT_ROOT");
  if (root && *root) return std::string(root) + "/" + cfg.out_dir;
  return cfg.out_dir;
}

TriMesh make_mesh(const RunConfig& cfg) {
  if (cfg.mesh_kind == "disk")
    return generate_disk_mesh(cfg.mesh_radius, cfg.mesh_h);
  if (cfg.mesh_kind == "rect") {
    std::function<bool(double, double)> keep;
    if (cfg.hole) {
      const double hx0 = cfg.hole_x0, hy0 = cfg.hole_y0;
      const double hx1 = cfg.hole_x1, hy1 = cfg.hole_y1;
      keep = [hx0, hy0, hx1, hy1](double x, double y) {
        return !(x > hx0 && x < hx1 && y > hy0 && y < hy1);
      };
    }
    return generate_rect_mesh(cfg.rect_x0, cfg.rect_y0, cfg.rect_x1,
                              cfg.rect_y1, cfg.mesh_h, keep);
  }
  if (cfg.mesh_kind == "file") {
    if (cfg.mesh_file.empty())
      throw ValidationError("mesh.kind = file requires mesh.file");
    return load_mesh(cfg.mesh_file);
  }
  throw ValidationError("unknown mesh.kind: " + cfg.mesh_kind);
}

DatasetConfig make_dataset_config(const RunConfig& cfg) {
  DatasetConfig dc;
  dc.n_sensors = cfg.n_sensors;
  dc.noise_std_u = cfg.noise_u;
  dc.noise_std_v = cfg.noise_v;
  dc.capacity = cfg.capacity;
  dc.refresh_count = cfg.refresh_count;
  dc.bump_radius = cfg.bump_radius;
  dc.exclusion = cfg.exclusion;
  dc.peclet_min = cfg.peclet_min;
  dc.peclet_max = cfg.peclet_max;
  dc.angle_min = cfg.angle_min;
  dc.angle_max = cfg.angle_max;
  if (cfg.velocity_mode == "fixed") {
    // Uniform unit flow pinned to the direction of (fixed_vx, fixed_vy).
    dc.velocity_mode = VelocityMode::kAngle;
    const double a = std::atan2(cfg.fixed_vy, cfg.fixed_vx);
    dc.angle_min = a;
    dc.angle_max = a;
  } else if (cfg.velocity_mode == "angle") {
    dc.velocity_mode = VelocityMode::kAngle;
  } else {
    throw ValidationError("unknown physics.velocity_mode: " + cfg.velocity_mode);
  }
  return dc;
}

}  // namespace cnwf
