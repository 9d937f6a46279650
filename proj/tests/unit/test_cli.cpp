#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "udl/experiments.hpp"

using namespace udl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Body = everything after the first line (the '#' metadata header).
std::string csv_body(const fs::path& p) {
  const std::string all = read_file(p);
  const auto pos = all.find('\n');
  REQUIRE(pos != std::string::npos);
  return all.substr(pos + 1);
}

ExperimentSpec tiny_jacobian_spec(const std::string& out, std::uint64_t seed, int threads) {
  ExperimentSpec spec;
  spec.command = "jacobian";
  spec.config = json{{"m", 10},       {"n", 15},          {"n_samples", 6}, {"n_max", 60},
                     {"grid_points", 8}, {"depths", {5, 10}}, {"ref_iters", 3000}};
  spec.seed = seed;
  spec.out_dir = out;
  spec.threads = threads;
  return spec;
}

}  // namespace

TEST_CASE("jacobian command emits the advertised files and shapes", "[cli]") {
  TempDir dir("udl_cli_jacobian");
  auto spec = tiny_jacobian_spec(dir.path.string(), 41, 2);
  run_command(spec);

  REQUIRE(fs::exists(dir.path / "spec.json"));
  REQUIRE(fs::exists(dir.path / "jacobian_curves.csv"));
  REQUIRE(fs::exists(dir.path / "jacobian_stability.csv"));
  REQUIRE(fs::exists(dir.path / "jacobian_summary.csv"));

  // one curve per sample per depth (full + two truncated)
  const std::string body = csv_body(dir.path / "jacobian_stability.csv");
  const auto rows = std::count(body.begin(), body.end(), '\n') - 1;  // minus header
  REQUIRE(rows == 6 * 3);

  const std::string summary = csv_body(dir.path / "jacobian_summary.csv");
  REQUIRE(std::count(summary.begin(), summary.end(), '\n') == 1 + 3);
}

TEST_CASE("command reruns are byte identical and thread independent", "[cli]") {
  TempDir a("udl_cli_det_a");
  TempDir b("udl_cli_det_b");
  TempDir c("udl_cli_det_c");
  run_command(tiny_jacobian_spec(a.path.string(), 17, 1));
  run_command(tiny_jacobian_spec(b.path.string(), 17, 2));
  run_command(tiny_jacobian_spec(c.path.string(), 17, 2));

  for (const char* file : {"jacobian_curves.csv", "jacobian_stability.csv",
                           "jacobian_summary.csv"}) {
    REQUIRE(csv_body(a.path / file) == csv_body(b.path / file));
    REQUIRE(csv_body(b.path / file) == csv_body(c.path / file));
  }

  // different seed changes the body
  TempDir d("udl_cli_det_d");
  run_command(tiny_jacobian_spec(d.path.string(), 18, 2));
  REQUIRE(csv_body(a.path / "jacobian_curves.csv") != csv_body(d.path / "jacobian_curves.csv"));
}

TEST_CASE("train command writes a crash-safe record and a checkpoint", "[cli]") {
  TempDir dir("udl_cli_train");
  ExperimentSpec spec;
  spec.command = "train";
  spec.config = json{{"m", 10},     {"n", 14},        {"t_samples", 60}, {"n_iters", 8},
                     {"max_steps", 10}, {"lambda", 0.15}, {"conv_tol", 1e-5}};
  spec.seed = 5;
  spec.out_dir = dir.path.string();
  spec.threads = 2;
  run_command(spec);

  REQUIRE(fs::exists(dir.path / "train_record.csv"));
  REQUIRE(fs::exists(dir.path / "train_timing.jsonl"));
  REQUIRE(fs::exists(dir.path / "dict_final.mat"));

  const Mat dict = read_matrix((dir.path / "dict_final.mat").string());
  REQUIRE(dict.rows() == 10);
  REQUIRE(dict.cols() == 14);
  for (Index j = 0; j < dict.cols(); ++j) {
    REQUIRE(std::abs(dict.col(j).norm() - 1.0) <= 1e-10);
  }

  // loss column (4th) is non-increasing across accepted phase-1 steps
  std::ifstream in(dir.path / "train_record.csv");
  std::string line;
  std::getline(in, line);  // meta
  std::getline(in, line);  // header
  double prev = std::numeric_limits<double>::infinity();
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string field;
    for (int i = 0; i < 4; ++i) std::getline(ss, field, ',');
    const double loss = std::stod(field);
    REQUIRE(loss <= prev + 1e-12);
    prev = loss;
    ++rows;
  }
  REQUIRE(rows >= 1);
}

TEST_CASE("verify accepts intact outputs and rejects tampering", "[cli]") {
  TempDir dir("udl_cli_verify");
  auto spec = tiny_jacobian_spec(dir.path.string(), 23, 2);
  run_command(spec);

  auto ok = verify_output_dir(dir.path.string());
  REQUIRE(ok.checked >= 3);
  REQUIRE(ok.failures.empty());

  // tamper with the seed recorded in spec.json: hashes no longer match
  {
    std::ifstream in(dir.path / "spec.json");
    json doc = json::parse(in);
    in.close();
    doc["seed"] = 999;
    std::ofstream out(dir.path / "spec.json", std::ios::trunc);
    out << doc.dump(2) << "\n";
  }
  auto bad = verify_output_dir(dir.path.string());
  REQUIRE_FALSE(bad.failures.empty());
}

TEST_CASE("checkpoint hashes are registered and verified", "[cli]") {
  TempDir dir("udl_cli_ckpt");
  ExperimentSpec spec;
  spec.command = "train";
  spec.config = json{{"m", 8},      {"n", 10},        {"t_samples", 40},
                     {"n_iters", 6}, {"max_steps", 4}, {"lambda", 0.2}};
  spec.seed = 7;
  spec.out_dir = dir.path.string();
  spec.threads = 1;
  run_command(spec);

  REQUIRE(verify_output_dir(dir.path.string()).failures.empty());

  // corrupt the checkpoint payload
  {
    std::fstream f(dir.path / "dict_final.mat",
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(-8, std::ios::end);
    const double garbage = 123.456;
    f.write(reinterpret_cast<const char*>(&garbage), sizeof(garbage));
  }
  const auto bad = verify_output_dir(dir.path.string());
  REQUIRE_FALSE(bad.failures.empty());
}

TEST_CASE("config errors are structured", "[cli]") {
  TempDir dir("udl_cli_badcfg");
  ExperimentSpec spec = tiny_jacobian_spec(dir.path.string(), 1, 1);
  spec.config["no_such_knob"] = 3;
  REQUIRE_THROWS_AS(run_command(spec), ConfigError);

  ExperimentSpec unknown;
  unknown.command = "frobnicate";
  unknown.out_dir = dir.path.string();
  REQUIRE_THROWS_AS(run_command(unknown), ConfigError);

  ExperimentSpec bad_alg = tiny_jacobian_spec(dir.path.string(), 1, 1);
  bad_alg.config["algorithm"] = "newton";
  REQUIRE_THROWS_AS(run_command(bad_alg), ConfigError);
}

TEST_CASE("denoise and linescan run at toy scale", "[cli]") {
  TempDir dir("udl_cli_denoise");
  // synthetic piecewise image so the command is self-contained
  Mat img(48, 48);
  CounterRng rng(300);
  for (Index c = 0; c < 48; ++c) {
    for (Index r = 0; r < 48; ++r) {
      img(r, c) = 0.25 + 0.5 * ((r / 8 + c / 8) % 2) + 0.02 * rng.next_gaussian();
    }
  }
  const auto image_path = (dir.path / "toy.pgm").string();
  write_pgm(image_path, img);

  ExperimentSpec spec;
  spec.command = "denoise";
  spec.config = json{{"image", image_path}, {"patch", 6},         {"n_patches", 80},
                     {"atoms", 12},         {"noise_var", 0.05},  {"iters_list", {2, 5}},
                     {"oracle_iters", 100}, {"max_steps", 8}};
  spec.seed = 31;
  spec.out_dir = dir.path.string();
  spec.threads = 2;
  run_command(spec);
  REQUIRE(fs::exists(dir.path / "denoise_psnr.csv"));
  const std::string body = csv_body(dir.path / "denoise_psnr.csv");
  // noisy input + two ddl rows + oracle
  REQUIRE(std::count(body.begin(), body.end(), '\n') == 1 + 4);

  TempDir dir2("udl_cli_linescan");
  ExperimentSpec scan;
  scan.command = "linescan";
  scan.config = json{{"m", 8},        {"n", 10},       {"t_samples", 40}, {"n_iters", 6},
                     {"max_steps", 6}, {"n_points", 9}, {"lambda", 0.2}};
  scan.seed = 33;
  scan.out_dir = dir2.path.string();
  scan.threads = 2;
  run_command(scan);
  const std::string curve = csv_body(dir2.path / "linescan.csv");
  REQUIRE(std::count(curve.begin(), curve.end(), '\n') == 1 + 9);
  REQUIRE(verify_output_dir(dir2.path.string()).failures.empty());
}
