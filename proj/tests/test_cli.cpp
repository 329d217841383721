#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cnwf/commands.hpp"
#include "cnwf/errors.hpp"
#include "cnwf/forward_fem.hpp"
#include "cnwf/mesh.hpp"
#include "cnwf/runconfig.hpp"
#include "json.hpp"

using namespace cnwf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cnwf_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Small everything: coarse mesh, tiny model, tiny dataset.
std::vector<std::string> tiny_overrides(const fs::path& root) {
  return {
      "mesh.h=0.15",
      "sensors.n=4",
      "sensors.noise_u=0",
      "sensors.noise_v=0",
      "dataset.capacity=4",
      "dataset.refresh_count=2",
      "dataset.dir=" + (root / "dataset").string(),
      "model.d_latent=8",
      "model.d_token=8",
      "model.encoder_blocks=1",
      "model.token_mlp_depth=1",
      "model.head_width=16",
      "model.head_depth=2",
      "model.d_key=4",
      "model.coord_width=8",
      "model.coord_depth=1",
      "model.sinkhorn_max_iter=40",
      "train.steps=3",
      "train.batch=2",
      "train.checkpoint_every=2",
      "eval.samples=2",
      "run.seed=7",
      "run.out_dir=" + (root / "out").string(),
  };
}

}  // namespace

TEST_CASE("config files parse sections, comments, quotes, and lists") {
  const fs::path root = fresh_dir("parse");
  const fs::path file = root / "run.cfg";
  write_file(file,
             "# experiment configuration\n"
             "[mesh]\n"
             "kind = \"rect\"\n"
             "h = 0.2          # coarse\n"
             "x1 = 2.0\n"
             "\n"
             "[sensors]\n"
             "n = 7\n"
             "\n"
             "[coverage]\n"
             "schedule = [2, 4, 8]\n"
             "safeguard = true\n"
             "\n"
             "[run]\n"
             "seed = 99\n"
             "out_dir = \"results\"\n");
  const RunConfig cfg = load_run_config(file.string());
  CHECK(cfg.mesh_kind == "rect");
  CHECK(cfg.mesh_h == doctest::Approx(0.2));
  CHECK(cfg.rect_x1 == doctest::Approx(2.0));
  CHECK(cfg.n_sensors == 7);
  CHECK(cfg.schedule == std::vector<int>{2, 4, 8});
  CHECK(cfg.safeguard);
  CHECK(cfg.seed == 99);
  CHECK(cfg.out_dir == "results");

  SUBCASE("overrides apply after the file, in order") {
    const RunConfig o = load_run_config(
        file.string(), {"sensors.n=3", "run.seed=1", "run.seed=2"});
    CHECK(o.n_sensors == 3);
    CHECK(o.seed == 2);
    CHECK(o.mesh_kind == "rect");
  }

  SUBCASE("defaults survive when no file is given") {
    const RunConfig d = load_run_config("");
    CHECK(d.mesh_kind == "disk");
    CHECK(d.capacity == 1600);
    CHECK(d.model.d_latent == 64);
  }
}

TEST_CASE("malformed configs are rejected with precise messages") {
  const fs::path root = fresh_dir("reject");

  SUBCASE("unknown key carries its line number") {
    const fs::path file = root / "bad.cfg";
    write_file(file, "[mesh]\nkind = disk\nradiuss = 2\n");
    try {
      load_run_config(file.string());
      FAIL("expected a parse error");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("radiuss") != std::string::npos);
      CHECK(msg.find(":3") != std::string::npos);
    }
  }

  SUBCASE("non-numeric value for a numeric key") {
    const fs::path file = root / "badnum.cfg";
    write_file(file, "[mesh]\nh = tiny\n");
    CHECK_THROWS_AS(load_run_config(file.string()), ValidationError);
  }

  SUBCASE("line without separator") {
    const fs::path file = root / "nosep.cfg";
    write_file(file, "[mesh]\nkind disk\n");
    CHECK_THROWS_AS(load_run_config(file.string()), ValidationError);
  }

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_run_config((root / "absent.cfg").string()),
                    ValidationError);
  }

  SUBCASE("unknown override key") {
    CHECK_THROWS_AS(load_run_config("", {"mesh.radiuss=2"}), ValidationError);
  }

  SUBCASE("override without equals sign") {
    CHECK_THROWS_AS(load_run_config("", {"mesh.radius"}), ValidationError);
  }
}

TEST_CASE("config hash is stable and content sensitive, echo is valid json") {
  const RunConfig a = load_run_config("");
  const RunConfig b = load_run_config("");
  CHECK(run_config_hash(a) == run_config_hash(b));
  const RunConfig c = load_run_config("", {"mesh.h=0.04"});
  CHECK(run_config_hash(a) != run_config_hash(c));

  const json echo = json::parse(run_config_json(a));
  CHECK(echo["mesh"]["kind"] == "disk");
  CHECK(echo["model"]["d_latent"] == 64);
  CHECK(echo["run"]["seed"] == "0");
}

TEST_CASE("out dir resolution honors the environment root for relative paths") {
  RunConfig cfg;
  cfg.out_dir = "/abs/path";
  setenv("CNWF_OUT_ROOT", "/env/root", 1);
  CHECK(resolve_out_dir(cfg) == "/abs/path");
  cfg.out_dir = "rel/path";
  CHECK(resolve_out_dir(cfg) == "/env/root/rel/path");
  unsetenv("CNWF_OUT_ROOT");
  CHECK(resolve_out_dir(cfg) == "rel/path");
}

TEST_CASE("mesh command writes a loadable mesh and a faithful summary") {
  const fs::path root = fresh_dir("mesh");
  RunConfig cfg = load_run_config("", {"mesh.h=0.15", "run.seed=5",
                                       "run.out_dir=" + (root / "a").string()});
  cmd_mesh(cfg);
  CHECK(fs::exists(root / "a" / "mesh.txt"));
  CHECK(fs::exists(root / "a" / "mesh.svg"));
  CHECK(fs::exists(root / "a" / "run_manifest.json"));

  const json summary = json::parse(slurp(root / "a" / "mesh_summary.json"));
  const TriMesh mesh = load_mesh((root / "a" / "mesh.txt").string());
  CHECK(summary["vertices"] == mesh.n_vertices());
  CHECK(summary["triangles"] == mesh.n_triangles());
  CHECK(summary["area"].get<double>() == doctest::Approx(mesh.area()));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(mesh_hash(mesh)));
  CHECK(summary["mesh_hash"] == std::string(buf));
  CHECK(summary["area_deviation_rel"].get<double>() < 0.05);

  SUBCASE("identical config reproduces the identical summary") {
    RunConfig again = cfg;
    again.out_dir = (root / "b").string();
    cmd_mesh(again);
    CHECK(slurp(root / "a" / "mesh_summary.json") ==
          slurp(root / "b" / "mesh_summary.json"));
  }

  SUBCASE("bad mesh kind is a validation error") {
    RunConfig bad = cfg;
    bad.mesh_kind = "torus";
    CHECK_THROWS_AS(cmd_mesh(bad), ValidationError);
  }

  SUBCASE("missing mesh file is a validation error") {
    RunConfig bad = cfg;
    bad.mesh_kind = "file";
    bad.mesh_file = (root / "nope.txt").string();
    CHECK_THROWS_AS(cmd_mesh(bad), ValidationError);
  }
}

TEST_CASE("datagen produces a loadable cache with exact zero-noise readings") {
  const fs::path root = fresh_dir("datagen");
  const RunConfig cfg = load_run_config("", tiny_overrides(root));
  cmd_datagen(cfg);

  const fs::path ddir = root / "dataset";
  CHECK(fs::exists(ddir / "manifest.json"));
  CHECK(fs::exists(ddir / "sample_000000.bin"));

  const TriMesh mesh = make_mesh(cfg);
  const SampleCache cache = load_sample_cache(ddir.string(), mesh);
  REQUIRE(static_cast<int>(cache.samples.size()) == 4);
  for (const SampleTriple& s : cache.samples) {
    REQUIRE(static_cast<int>(s.observation.sensors.size()) == 4);
    for (const Observation& ob : s.observation.sensors) {
      const PointLocation loc = locate_point(mesh, ob.position);
      REQUIRE(loc.inside);
      CHECK(ob.u == doctest::Approx(interpolate(mesh, s.field, loc))
                        .epsilon(1e-13));
      const double vx = interpolate(mesh, s.velocity.col(0), loc);
      const double vy = interpolate(mesh, s.velocity.col(1), loc);
      CHECK(ob.v.x() == doctest::Approx(vx).epsilon(1e-13));
      CHECK(ob.v.y() == doctest::Approx(vy).epsilon(1e-13));
    }
  }

  SUBCASE("a second run with the same config and seed is skipped") {
    const auto stamp = fs::last_write_time(ddir / "sample_000000.bin");
    cmd_datagen(cfg);
    CHECK(fs::last_write_time(ddir / "sample_000000.bin") == stamp);
  }

  SUBCASE("a different seed regenerates the cache") {
    RunConfig reseeded = cfg;
    reseeded.seed = 8;
    cmd_datagen(reseeded);
    const json manifest = json::parse(slurp(ddir / "manifest.json"));
    CHECK(manifest["seed"] == "8");
  }
}

TEST_CASE("training checkpoints, logs, and resumes with a continuous trace") {
  const fs::path root = fresh_dir("train");
  const RunConfig cfg = load_run_config("", tiny_overrides(root));
  cmd_datagen(cfg);
  cmd_train(cfg);

  const fs::path out = root / "out";
  CHECK(fs::exists(out / "checkpoint" / "params.bin"));
  CHECK(fs::exists(out / "checkpoint" / "adam.bin"));
  CHECK(fs::exists(out / "train_loss.svg"));

  std::istringstream log(slurp(out / "train.jsonl"));
  std::vector<json> lines;
  for (std::string line; std::getline(log, line);)
    lines.push_back(json::parse(line));
  REQUIRE(static_cast<int>(lines.size()) == 3);
  CHECK(lines[0]["step"] == 0);
  CHECK(lines[2]["step"] == 2);
  for (const json& l : lines) CHECK(std::isfinite(l["total"].get<double>()));

  SUBCASE("restart extends the run without rewriting history") {
    const std::string before = slurp(out / "train.jsonl");
    RunConfig longer = cfg;
    longer.steps = 5;
    cmd_train(longer);
    const std::string after = slurp(out / "train.jsonl");
    CHECK(after.substr(0, before.size()) == before);
    std::istringstream more(after);
    int n = 0;
    for (std::string line; std::getline(more, line);) ++n;
    CHECK(n == 5);
    long step = 0;
    load_checkpoint((out / "checkpoint").string(), &step);
    CHECK(step == 5);
  }

  SUBCASE("a checkpoint from a different model config is refused") {
    RunConfig other = cfg;
    other.model.d_latent = 16;
    CHECK_THROWS_AS(cmd_train(other), ValidationError);
  }

  SUBCASE("baseline training writes its own checkpoint") {
    RunConfig base = cfg;
    base.baseline = "mlp";
    base.baseline_width = 16;
    base.baseline_depth = 2;
    base.steps = 2;
    cmd_train(base);
    CHECK(fs::exists(out / "checkpoint_baseline" / "params.bin"));
    const json manifest =
        json::parse(slurp(out / "checkpoint_baseline" / "manifest.json"));
    CHECK(manifest["kind"] == "baseline_mlp");
  }
}

TEST_CASE("training without a dataset points at datagen") {
  const fs::path root = fresh_dir("train_nodata");
  const RunConfig cfg = load_run_config("", tiny_overrides(root));
  try {
    cmd_train(cfg);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("datagen") != std::string::npos);
  }
}

TEST_CASE("oracle evaluation is exact and metrics are byte reproducible") {
  const fs::path root = fresh_dir("eval");
  RunConfig cfg = load_run_config("", tiny_overrides(root));
  cmd_eval(cfg, "", "", true);
  const json m = json::parse(slurp(root / "out" / "metrics.json"));
  CHECK(m["checkpoint"] == "oracle");
  CHECK(m["mean_w2"].get<double>() <= 1e-9);
  CHECK(m["mean_consistency"].get<double>() <= 1e-8);
  CHECK(m["non_converged"] == 0);
  CHECK(m["reference_full_scale"]["cnwf_w2"].get<double>() ==
        doctest::Approx(2.20e-3));
  CHECK(m["reference_full_scale"]["encoder_w2"].get<double>() ==
        doctest::Approx(7.98e-3));

  RunConfig rerun = cfg;
  rerun.out_dir = (root / "out2").string();
  cmd_eval(rerun, "", "", true);
  CHECK(slurp(root / "out" / "metrics.json") ==
        slurp(root / "out2" / "metrics.json"));
}

TEST_CASE("evaluating a trained checkpoint yields finite comparable metrics") {
  const fs::path root = fresh_dir("eval_ckpt");
  const RunConfig cfg = load_run_config("", tiny_overrides(root));
  cmd_datagen(cfg);
  cmd_train(cfg);
  const std::string ckpt = (root / "out" / "checkpoint").string();
  cmd_eval(cfg, ckpt);
  const json m = json::parse(slurp(root / "out" / "metrics.json"));
  CHECK(m["checkpoint"] == ckpt);
  CHECK(std::isfinite(m["mean_w2"].get<double>()));
  CHECK(m["mean_w2"].get<double>() > 0.0);
  CHECK(std::isfinite(m["mean_consistency"].get<double>()));
  CHECK(fs::exists(root / "out" / "eval_sample0_pred.svg"));
  CHECK(fs::exists(root / "out" / "eval_sample0_true.svg"));
}

TEST_CASE("oracle coverage run descends and logs a trajectory") {
  const fs::path root = fresh_dir("cov");
  std::vector<std::string> ov = tiny_overrides(root);
  ov.push_back("coverage.K=2");
  ov.push_back("coverage.m=1");
  const RunConfig cfg = load_run_config("", ov);
  cmd_coverage(cfg, "oracle");
  const json r = json::parse(slurp(root / "out" / "coverage_report.json"));
  CHECK(r["monotone"]);
  CHECK(r["J_final"].get<double>() <= r["J_initial"].get<double>());
  const std::string csv = slurp(root / "out" / "trajectory.csv");
  CHECK(csv.rfind("trial,k,inner_iter,sensor_id,x,y,J_model,J_true", 0) == 0);
  CHECK(fs::exists(root / "out" / "energy.svg"));
}

TEST_CASE("unknown coverage mode is rejected") {
  const fs::path root = fresh_dir("cov_bad");
  const RunConfig cfg = load_run_config("", tiny_overrides(root));
  CHECK_THROWS_AS(cmd_coverage(cfg, "sideways"), ValidationError);
}
