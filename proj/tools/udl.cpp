// udl: seeded experiment runner for unrolled dictionary learning.
//
//   udl <command> --config <file> --seed <u64> --out <dir> [--threads <k>]
//   udl verify <dir>
//
// Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 IO error.

#include <cstdio>
#include <exception>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "udl/experiments.hpp"
#include "udl/parallel.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

udl::json load_config(const std::string& path) {
  if (path.empty()) return udl::json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw udl::ConfigError("cannot open config file '" + path + "'");
  try {
    return udl::json::parse(in);
  } catch (const udl::json::exception& e) {
    throw udl::ConfigError("config parse error in '" + path + "': " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lasso dictionary learning via alternating minimization and unrolling"};
  app.require_subcommand(1);

  const std::vector<std::string> commands = {"jacobian", "gradients", "train",   "sgd",
                                             "csc",      "denoise",   "linescan"};
  struct Args {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    int threads = 0;
  };
  std::map<std::string, Args> args;
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    auto& a = args[name];
    sub->add_option("--config", a.config, "JSON config file (defaults used when omitted)");
    sub->add_option("--seed", a.seed, "experiment seed")->required();
    sub->add_option("--out", a.out, "output directory")->required();
    sub->add_option("--threads", a.threads, "worker thread cap (default: hardware)");
  }
  std::string verify_dir;
  auto* verify = app.add_subcommand("verify", "recompute and check spec hashes in an output dir");
  verify->add_option("dir", verify_dir, "output directory to verify")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (verify->parsed()) {
      const auto result = udl::verify_output_dir(verify_dir);
      for (const auto& f : result.failures) std::fprintf(stderr, "verify: %s\n", f.c_str());
      std::printf("verify: %d files checked, %zu failures\n", result.checked,
                  result.failures.size());
      return result.failures.empty() ? kExitOk : kExitNumerical;
    }
    for (const auto& name : commands) {
      if (!app.get_subcommand(name)->parsed()) continue;
      const Args& a = args[name];
      udl::ExperimentSpec spec;
      spec.command = name;
      spec.config = load_config(a.config);
      spec.seed = a.seed;
      spec.out_dir = a.out;
      spec.threads = a.threads > 0 ? a.threads : udl::hardware_threads();
      udl::set_max_threads(spec.threads);
      return udl::run_command(std::move(spec));
    }
    return kExitConfig;
  } catch (const udl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const udl::ParseError& e) {
    std::fprintf(stderr, "input parse error: %s\n", e.what());
    return kExitIo;
  } catch (const udl::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const udl::DivergenceError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const udl::SingularGramError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  }
}
