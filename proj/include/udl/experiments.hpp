#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "udl/csv.hpp"
#include "udl/datagen.hpp"
#include "udl/jacobian.hpp"
#include "udl/matrix_io.hpp"
#include "udl/metrics.hpp"
#include "udl/outer_opt.hpp"
#include "udl/parallel.hpp"

namespace udl {

using json = nlohmann::json;

/// One experiment: command, effective config (defaults merged), seed, output
/// directory. The canonical form (command + seed + sorted-key config) is
/// hashed into every emitted file.
struct ExperimentSpec {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::string out_dir;
  int threads = 0;

  std::string canonical() const {
    return command + "\n" + std::to_string(seed) + "\n" + config.dump();
  }
  std::uint64_t hash() const { return fnv1a64(canonical()); }

  /// Metadata line for emitted files. The timestamp lives here and only here.
  std::string meta(const json& extra = json::object()) const {
    json m = extra;
    m["command"] = command;
    m["seed"] = seed;
    m["spec_hash"] = hex64(hash());
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    m["created"] = buf;
    return m.dump();
  }

  void write_spec_file() const {
    json doc;
    doc["command"] = command;
    doc["seed"] = seed;
    doc["config"] = config;
    std::ofstream out(std::filesystem::path(out_dir) / "spec.json",
                      std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(out_dir + "/spec.json", "cannot write spec");
    out << doc.dump(2) << "\n";
  }

  std::string path(const std::string& file) const {
    return (std::filesystem::path(out_dir) / file).string();
  }
};

namespace detail {

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown config key '" + key + "'");
    }
  }
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

inline Algorithm parse_algorithm(const std::string& name) {
  if (name == "ista") return Algorithm::Ista;
  if (name == "fista") return Algorithm::Fista;
  throw ConfigError("algorithm must be 'ista' or 'fista', got '" + name + "'");
}

inline Mode parse_mode(const std::string& name) {
  if (name == "am") return Mode::AM;
  if (name == "ddl") return Mode::DDL;
  throw ConfigError("mode must be 'am' or 'ddl', got '" + name + "'");
}

/// Distinct, sorted, roughly log-spaced integers in [1, n_max].
inline std::vector<int> log_grid(int n_max, int points) {
  std::vector<int> grid;
  if (n_max < 1) return grid;
  const double ratio = std::pow(static_cast<double>(n_max), 1.0 / std::max(1, points - 1));
  double value = 1.0;
  for (int i = 0; i < points; ++i) {
    const int n = std::min(n_max, std::max(1, static_cast<int>(std::lround(value))));
    if (grid.empty() || grid.back() != n) grid.push_back(n);
    value *= ratio;
  }
  if (grid.back() != n_max) grid.push_back(n_max);
  return grid;
}

inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for hashing");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes);
}

/// Registers checkpoint hashes in spec.json so `verify` can cover binary
/// outputs too (the UDLMAT1 header has no room for a hash).
inline void register_checkpoints(const ExperimentSpec& spec,
                                 const std::vector<std::string>& files) {
  const std::string spec_path = spec.path("spec.json");
  std::ifstream in(spec_path, std::ios::binary);
  if (!in) throw IoError(spec_path, "spec.json missing");
  json doc = json::parse(in);
  in.close();
  json hashes = json::object();
  for (const auto& f : files) hashes[f] = hex64(file_hash(spec.path(f)));
  doc["checkpoints"] = hashes;
  std::ofstream out(spec_path, std::ios::binary | std::ios::trunc);
  out << doc.dump(2) << "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// jacobian: convergence curves of the forward-propagated stack towards the
// fixed point, per sample, for full back-propagation and truncated depths,
// plus the stability classification.
// ---------------------------------------------------------------------------

struct JacobianCmdResult {
  std::vector<int> grid;
  std::vector<std::vector<JacobianCurve>> curves;  // [depth][sample]
  std::vector<int> depths;                         // kFullDepth first
  std::vector<StabilityReport> stability;          // per depth
};

inline JacobianCmdResult cmd_jacobian(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"m", "n", "sparsity", "sigma_z", "noise_var", "perturbation", "lambda",
                      "n_samples", "n_max", "grid_points", "depths", "algorithm", "ref_iters",
                      "stability_factor"},
                     "jacobian");
  const Index m = detail::get_or<Index>(cfg, "m", 30);
  const Index n = detail::get_or<Index>(cfg, "n", 50);
  const double sparsity = detail::get_or<double>(cfg, "sparsity", 0.3);
  const double sigma_z = detail::get_or<double>(cfg, "sigma_z", 1.0);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
  const double perturbation = detail::get_or<double>(cfg, "perturbation", 0.5);
  const double lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  const int n_samples = detail::get_or<int>(cfg, "n_samples", 50);
  const int n_max = detail::get_or<int>(cfg, "n_max", 1000);
  const int grid_points = detail::get_or<int>(cfg, "grid_points", 40);
  const std::vector<int> trunc_depths =
      detail::get_or<std::vector<int>>(cfg, "depths", {20, 50});
  const Algorithm alg =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "ista"));
  const int ref_iters = detail::get_or<int>(cfg, "ref_iters", 10000);
  const double stability_factor = detail::get_or<double>(cfg, "stability_factor", 10.0);

  const CounterRng root(spec.seed);
  const DenseDictionary truth = gen_gaussian_dict(m, n, root.stream(1).seed());
  const Mat codes = gen_bernoulli_gaussian(n, n_samples, sparsity, sigma_z, root.stream(2).seed());
  const Mat signals = gen_observations(truth, codes, noise_var, root.stream(3).seed());
  const DenseDictionary dict = perturb_dict(truth, perturbation, root.stream(4).seed());

  JacobianCmdResult result;
  result.grid = detail::log_grid(n_max, grid_points);
  result.depths.push_back(kFullDepth);
  for (int d : trunc_depths) result.depths.push_back(d);
  result.curves.assign(result.depths.size(), std::vector<JacobianCurve>(
                                                 static_cast<std::size_t>(n_samples)));

  UnrollConfig ucfg;
  ucfg.algorithm = alg;
  ucfg.lambda = lambda;
  ucfg.n_iters = n_max;

  parallel_for_blocks(
      n_samples, 1,
      [&](Index, Index s, Index) {
        const Vec y = signals.col(s);
        const auto ref = compute_reference(dict, y, lambda, ref_iters);
        JacobianStack j_star;
        bool singular = false;
        try {
          j_star = jacobian_fixed_point(dict, ref.z_star, y);
        } catch (const SingularGramError&) {
          singular = true;
          j_star = JacobianStack(m, n);
        }
        const JacobianReplay replay(dict, y, ucfg);
        for (std::size_t d = 0; d < result.depths.size(); ++d) {
          auto curve = replay.error_curve(j_star, ref.support_star, result.grid,
                                          result.depths[d]);
          if (singular) curve.has_nonfinite = true;
          result.curves[d][static_cast<std::size_t>(s)] = std::move(curve);
        }
      },
      spec.threads);

  for (std::size_t d = 0; d < result.depths.size(); ++d) {
    result.stability.push_back(classify_stability(result.curves[d], stability_factor));
  }

  // emit
  auto depth_name = [](int d) { return d == kFullDepth ? std::string("full") : std::to_string(d); };
  {
    CsvWriter out(spec.path("jacobian_curves.csv"), spec.meta(), {"sample", "depth", "iter", "error"});
    for (std::size_t d = 0; d < result.depths.size(); ++d) {
      for (int s = 0; s < n_samples; ++s) {
        const auto& curve = result.curves[d][static_cast<std::size_t>(s)];
        for (std::size_t i = 0; i < curve.iters.size(); ++i) {
          out.write_row({std::to_string(s), depth_name(result.depths[d]),
                         std::to_string(curve.iters[i]), format_double(curve.errors[i])});
        }
      }
    }
  }
  {
    CsvWriter out(spec.path("jacobian_stability.csv"), spec.meta(),
                  {"sample", "depth", "unstable", "support_identified_at"});
    for (std::size_t d = 0; d < result.depths.size(); ++d) {
      for (int s = 0; s < n_samples; ++s) {
        const auto& curve = result.curves[d][static_cast<std::size_t>(s)];
        out.write_row({std::to_string(s), depth_name(result.depths[d]),
                       std::to_string(static_cast<int>(result.stability[d].unstable[
                           static_cast<std::size_t>(s)])),
                       std::to_string(curve.support_identified_at)});
      }
    }
  }
  {
    CsvWriter out(spec.path("jacobian_summary.csv"), spec.meta(),
                  {"depth", "n_samples", "unstable_fraction"});
    for (std::size_t d = 0; d < result.depths.size(); ++d) {
      out.write_row({depth_name(result.depths[d]), std::to_string(n_samples),
                     format_double(result.stability[d].fraction)});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// gradients: angle / norm-error / relative-angle-difference curves versus the
// iteration count, for g1 and g2 at several back-propagation depths.
// ---------------------------------------------------------------------------

struct GradientsCmdResult {
  std::vector<int> grid;
  std::vector<int> depths;
  // mean relative angle difference per (depth, grid point)
  std::vector<std::vector<double>> rad_mean;
};

inline GradientsCmdResult cmd_gradients(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"m", "n", "sparsity", "sigma_z", "noise_var", "perturbation", "lambda",
                      "n_samples", "n_max", "grid_points", "depths", "algorithm", "ref_iters",
                      "image", "patch", "atoms"},
                     "gradients");
  const double lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  const int n_samples = detail::get_or<int>(cfg, "n_samples", 100);
  const int n_max = detail::get_or<int>(cfg, "n_max", 300);
  const int grid_points = detail::get_or<int>(cfg, "grid_points", 14);
  const std::vector<int> depth_list =
      detail::get_or<std::vector<int>>(cfg, "depths", {20, 50, kFullDepth});
  const Algorithm alg =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "fista"));
  const int ref_iters = detail::get_or<int>(cfg, "ref_iters", 10000);

  const CounterRng root(spec.seed);
  DenseDictionary dict;
  Mat signals;
  if (cfg.contains("image")) {
    // image protocol: patches as samples, dictionary of random patches
    const Index patch = detail::get_or<Index>(cfg, "patch", 10);
    const Index atoms = detail::get_or<Index>(cfg, "atoms", 128);
    const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
    const auto set = load_pgm_patches(cfg.at("image").get<std::string>(), patch,
                                      n_samples + atoms, noise_var, root.stream(1).seed());
    signals = set.noisy.leftCols(n_samples);
    Mat atom_data = set.noisy.rightCols(atoms);
    dict = project_unit_norm(DenseDictionary(std::move(atom_data)));
  } else {
    const Index m = detail::get_or<Index>(cfg, "m", 30);
    const Index n = detail::get_or<Index>(cfg, "n", 50);
    const double sparsity = detail::get_or<double>(cfg, "sparsity", 0.3);
    const double sigma_z = detail::get_or<double>(cfg, "sigma_z", 1.0);
    const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
    const double perturbation = detail::get_or<double>(cfg, "perturbation", 0.5);
    const DenseDictionary truth = gen_gaussian_dict(m, n, root.stream(1).seed());
    const Mat codes =
        gen_bernoulli_gaussian(n, n_samples, sparsity, sigma_z, root.stream(2).seed());
    signals = gen_observations(truth, codes, noise_var, root.stream(3).seed());
    dict = perturb_dict(truth, perturbation, root.stream(4).seed());
  }

  GradientsCmdResult result;
  result.grid = detail::log_grid(n_max, grid_points);
  result.depths = depth_list;

  struct SampleRow {
    double angle1 = std::numeric_limits<double>::quiet_NaN();
    double angle2 = std::numeric_limits<double>::quiet_NaN();
    double err1 = std::numeric_limits<double>::quiet_NaN();
    double err2 = std::numeric_limits<double>::quiet_NaN();
    double rad = std::numeric_limits<double>::quiet_NaN();
    bool unstable = false;
  };
  // [depth][grid][sample]
  std::vector<std::vector<std::vector<SampleRow>>> table(
      depth_list.size(),
      std::vector<std::vector<SampleRow>>(result.grid.size(),
                                          std::vector<SampleRow>(
                                              static_cast<std::size_t>(n_samples))));

  UnrollConfig ucfg;
  ucfg.algorithm = alg;
  ucfg.lambda = lambda;
  ucfg.n_iters = n_max;

  parallel_for_blocks(
      n_samples, 1,
      [&](Index, Index s, Index) {
        const Vec y = signals.col(s);
        const auto ref = compute_reference(dict, y, lambda, ref_iters);
        const double g_star_norm = std::max(ref.g_star.norm(), 1e-300);
        const JacobianReplay replay(dict, y, ucfg);

        for (std::size_t d = 0; d < depth_list.size(); ++d) {
          std::size_t gi = 0;
          replay.walk(result.grid, depth_list[d], [&](int n_it, const JacobianStack& stack) {
            const Vec z_n = replay.trace().iterates[static_cast<std::size_t>(n_it)];
            const Vec residual = dict.apply(z_n) - y;
            const Mat g1 = residual * z_n.transpose();
            const Vec v = dict.adjoint(residual) + lambda * z_n.array().sign().matrix();
            Mat g2 = g1;
            for (Index l = 0; l < dict.signal_dim(); ++l) {
              g2.row(l) += (stack.block(l).transpose() * v).transpose();
            }
            SampleRow row;
            row.unstable = stack.unstable() || !g2.allFinite();
            const auto a1 = cosine_angle(g1, ref.g_star);
            const auto a2 = cosine_angle(g2, ref.g_star);
            const auto rad = relative_angle_difference(g1, g2, ref.g_star);
            if (a1) row.angle1 = *a1;
            if (a2) row.angle2 = *a2;
            if (rad) row.rad = *rad;
            row.err1 = (g1 - ref.g_star).norm() / g_star_norm;
            row.err2 = (g2 - ref.g_star).norm() / g_star_norm;
            table[d][gi++][static_cast<std::size_t>(s)] = row;
          });
        }
      },
      spec.threads);

  auto depth_name = [](int d) { return d == kFullDepth ? std::string("full") : std::to_string(d); };
  auto stats = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean = v.empty() ? std::numeric_limits<double>::quiet_NaN()
                     : mean / static_cast<double>(v.size());
    return std::array<double, 3>{mean, detail::quantile(v, 0.1), detail::quantile(v, 0.9)};
  };

  CsvWriter angle_out(spec.path("gradient_curves.csv"), spec.meta(),
                      {"iter", "depth", "estimator", "angle_mean", "angle_q10", "angle_q90",
                       "relerr_mean", "relerr_q10", "relerr_q90", "n_unstable"});
  CsvWriter rad_out(spec.path("rad_curves.csv"), spec.meta(),
                    {"iter", "depth", "rad_mean", "rad_q10", "rad_q90", "n_indeterminate"});
  result.rad_mean.assign(depth_list.size(), std::vector<double>(result.grid.size(), 0.0));
  for (std::size_t d = 0; d < depth_list.size(); ++d) {
    for (std::size_t gi = 0; gi < result.grid.size(); ++gi) {
      std::vector<double> a1, a2, e1, e2, rad;
      int unstable = 0, indeterminate = 0;
      for (const auto& row : table[d][gi]) {
        if (std::isfinite(row.angle1)) a1.push_back(row.angle1);
        if (std::isfinite(row.angle2)) a2.push_back(row.angle2);
        if (std::isfinite(row.err1)) e1.push_back(row.err1);
        if (std::isfinite(row.err2)) e2.push_back(row.err2);
        if (std::isfinite(row.rad)) rad.push_back(row.rad);
        else ++indeterminate;
        unstable += row.unstable ? 1 : 0;
      }
      const auto s1 = stats(a1), s2 = stats(a2), se1 = stats(e1), se2 = stats(e2),
                 sr = stats(rad);
      const std::string iter = std::to_string(result.grid[gi]);
      angle_out.write_row({iter, depth_name(depth_list[d]), "g1", format_double(s1[0]),
                           format_double(s1[1]), format_double(s1[2]), format_double(se1[0]),
                           format_double(se1[1]), format_double(se1[2]), "0"});
      angle_out.write_row({iter, depth_name(depth_list[d]), "g2", format_double(s2[0]),
                           format_double(s2[1]), format_double(s2[2]), format_double(se2[0]),
                           format_double(se2[1]), format_double(se2[2]),
                           std::to_string(unstable)});
      rad_out.write_row({iter, depth_name(depth_list[d]), format_double(sr[0]),
                         format_double(sr[1]), format_double(sr[2]),
                         std::to_string(indeterminate)});
      result.rad_mean[d][gi] = sr[0];
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// train / sgd / csc / denoise / linescan
// ---------------------------------------------------------------------------

namespace detail {

/// Crash-safe training record: the CSV header is written before the first
/// row, every row is appended and flushed as soon as the trainer emits it,
/// and per-step wall-clock goes to a JSON-lines sidecar so the CSV body stays
/// a pure function of spec + seed.
class RecordSink {
 public:
  RecordSink(const ExperimentSpec& spec, const std::string& csv_name,
             const std::string& timing_name)
      : csv_(spec.path(csv_name), spec.meta(), RunRecord::header(), /*flush_rows=*/true),
        timing_(spec.path(timing_name), std::ios::binary | std::ios::trunc) {
    if (!timing_) throw IoError(spec.path(timing_name), "cannot open for writing");
    timing_ << "{\"meta\":" << spec.meta() << "}\n";
    timing_.flush();
  }

  std::function<void(const RecordRow&)> sink() {
    return [this](const RecordRow& row) {
      csv_.write_row(RunRecord::fields(row));
      timing_ << "{\"step\":" << row.step << ",\"epoch\":" << row.epoch
              << ",\"seconds\":" << format_double(row.seconds) << "}\n";
      timing_.flush();
    };
  }

 private:
  CsvWriter csv_;
  std::ofstream timing_;
};

}  // namespace detail

struct TrainCmdResult {
  TrainResult train;
  double final_score = std::numeric_limits<double>::quiet_NaN();
};

inline TrainCmdResult cmd_train(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"m", "n", "t_samples", "sparsity", "sigma_z", "noise_var", "perturbation",
                      "lambda", "n_iters", "truncation", "algorithm", "mode", "learn_steps",
                      "max_steps", "phase2_max_steps", "conv_tol", "patience", "stop_at_score"},
                     "train");
  const Index m = detail::get_or<Index>(cfg, "m", 30);
  const Index n = detail::get_or<Index>(cfg, "n", 50);
  const Index t_samples = detail::get_or<Index>(cfg, "t_samples", 300);
  const double sparsity = detail::get_or<double>(cfg, "sparsity", 0.3);
  const double sigma_z = detail::get_or<double>(cfg, "sigma_z", 1.0);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
  const double perturbation = detail::get_or<double>(cfg, "perturbation", 0.5);

  TrainOptions opt;
  opt.inner.lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  opt.inner.n_iters = detail::get_or<int>(cfg, "n_iters", 40);
  opt.inner.truncation_depth = detail::get_or<int>(cfg, "truncation", kFullDepth);
  opt.inner.algorithm =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "fista"));
  opt.mode = detail::parse_mode(detail::get_or<std::string>(cfg, "mode", "ddl"));
  opt.learn_steps = detail::get_or<bool>(cfg, "learn_steps", false);
  opt.max_outer_steps = detail::get_or<int>(cfg, "max_steps", 500);
  opt.phase2_max_steps = detail::get_or<int>(cfg, "phase2_max_steps", 200);
  opt.conv_tol = detail::get_or<double>(cfg, "conv_tol", 1e-6);
  opt.patience = detail::get_or<int>(cfg, "patience", 5);
  opt.stop_at_score = detail::get_or<double>(cfg, "stop_at_score", -1.0);
  opt.threads = spec.threads;

  const CounterRng root(spec.seed);
  const DenseDictionary truth = gen_gaussian_dict(m, n, root.stream(1).seed());
  const Mat codes = gen_bernoulli_gaussian(n, t_samples, sparsity, sigma_z, root.stream(2).seed());
  const Mat signals = gen_observations(truth, codes, noise_var, root.stream(3).seed());
  const DenseDictionary init = perturb_dict(truth, perturbation, root.stream(4).seed());

  detail::RecordSink sink(spec, "train_record.csv", "train_timing.jsonl");
  opt.row_sink = sink.sink();
  TrainCmdResult result;
  result.train = train_full_batch(init, signals, &truth, opt);
  result.final_score = result.train.state.score_history.empty()
                           ? recovery_score(truth, result.train.state.dict)
                           : result.train.state.score_history.back();

  write_matrix(spec.path("dict_final.mat"), result.train.state.dict.data());
  detail::register_checkpoints(spec, {"dict_final.mat"});
  return result;
}

inline TrainCmdResult cmd_sgd(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"m", "n", "t_samples", "sparsity", "sigma_z", "noise_var", "lambda",
                      "n_iters", "truncation", "algorithm", "mode", "minibatch", "epochs",
                      "iters_per_epoch", "decay", "growth", "stop_at_score"},
                     "sgd");
  const Index m = detail::get_or<Index>(cfg, "m", 50);
  const Index n = detail::get_or<Index>(cfg, "n", 100);
  const Index t_samples = detail::get_or<Index>(cfg, "t_samples", 10000);
  const double sparsity = detail::get_or<double>(cfg, "sparsity", 0.3);
  const double sigma_z = detail::get_or<double>(cfg, "sigma_z", 1.0);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);

  StochasticOptions opt;
  opt.inner.lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  opt.inner.n_iters = detail::get_or<int>(cfg, "n_iters", 30);
  opt.inner.truncation_depth = detail::get_or<int>(cfg, "truncation", kFullDepth);
  opt.inner.algorithm =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "fista"));
  opt.mode = detail::parse_mode(detail::get_or<std::string>(cfg, "mode", "ddl"));
  opt.minibatch = detail::get_or<Index>(cfg, "minibatch", 500);
  opt.epochs = detail::get_or<int>(cfg, "epochs", 10);
  opt.iters_per_epoch = detail::get_or<int>(cfg, "iters_per_epoch", 100);
  opt.line_search.max_step_decay = detail::get_or<double>(cfg, "decay", 0.95);
  opt.line_search.step_reset_growth = detail::get_or<double>(cfg, "growth", 2.0);
  opt.stop_at_score = detail::get_or<double>(cfg, "stop_at_score", -1.0);
  opt.threads = spec.threads;
  opt.seed = spec.seed;

  const CounterRng root(spec.seed);
  const DenseDictionary truth = gen_gaussian_dict(m, n, root.stream(1).seed());
  const Mat codes = gen_bernoulli_gaussian(n, t_samples, sparsity, sigma_z, root.stream(2).seed());
  const Mat signals = gen_observations(truth, codes, noise_var, root.stream(3).seed());
  // random initialization (not a perturbation of the truth)
  const DenseDictionary init = gen_gaussian_dict(m, n, root.stream(5).seed());

  detail::RecordSink sink(spec, "sgd_record.csv", "sgd_timing.jsonl");
  opt.row_sink = sink.sink();
  TrainCmdResult result;
  result.train = train_stochastic(init, signals, &truth, opt);
  result.final_score = result.train.state.score_history.empty()
                           ? recovery_score(truth, result.train.state.dict)
                           : result.train.state.score_history.back();

  write_matrix(spec.path("dict_final.mat"), result.train.state.dict.data());
  detail::register_checkpoints(spec, {"dict_final.mat"});
  return result;
}

struct CscCmdResult {
  CscResult csc;
};

inline CscCmdResult cmd_csc(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"channels", "kernel_len", "atoms", "t_total", "spike_rate", "noise_var",
                      "window", "windows_per_batch", "epochs", "iters_per_epoch", "lambda_frac",
                      "n_iters", "truncation", "algorithm", "decay", "signal", "stop_at_score"},
                     "csc");
  const Index channels = detail::get_or<Index>(cfg, "channels", 8);
  const Index kernel_len = detail::get_or<Index>(cfg, "kernel_len", 16);
  const Index atoms = detail::get_or<Index>(cfg, "atoms", 3);
  const Index t_total = detail::get_or<Index>(cfg, "t_total", 4000);
  const double spike_rate = detail::get_or<double>(cfg, "spike_rate", 0.02);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.01);

  CscOptions opt;
  opt.inner.n_iters = detail::get_or<int>(cfg, "n_iters", 30);
  opt.inner.truncation_depth = detail::get_or<int>(cfg, "truncation", kFullDepth);
  opt.inner.algorithm =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "fista"));
  opt.lambda_frac = detail::get_or<double>(cfg, "lambda_frac", 0.3);
  opt.window = detail::get_or<Index>(cfg, "window", 256);
  opt.windows_per_batch = detail::get_or<Index>(cfg, "windows_per_batch", 10);
  opt.epochs = detail::get_or<int>(cfg, "epochs", 30);
  opt.iters_per_epoch = detail::get_or<int>(cfg, "iters_per_epoch", 6);
  opt.line_search.max_step_decay = detail::get_or<double>(cfg, "decay", 0.85);
  opt.stop_at_score = detail::get_or<double>(cfg, "stop_at_score", -1.0);
  opt.threads = spec.threads;
  opt.seed = spec.seed;

  const CounterRng root(spec.seed);
  RankOneSynthetic data;
  const RankOneConvDictionary* truth = nullptr;
  if (cfg.contains("signal")) {
    data.signal = read_matrix(cfg.at("signal").get<std::string>());
    require_shape(data.signal.rows() == channels,
                  "csc: signal has " + std::to_string(data.signal.rows()) +
                      " channels, config says " + std::to_string(channels));
  } else {
    data = gen_rank1_conv_data(channels, kernel_len, atoms, t_total, spike_rate, noise_var,
                               root.stream(1).seed());
    truth = &data.dict;
  }

  // random initialization
  CounterRng init_rng = root.stream(2);
  Mat u0(channels, atoms), v0(kernel_len, atoms);
  for (Index k = 0; k < atoms; ++k) {
    for (Index i = 0; i < channels; ++i) u0(i, k) = init_rng.next_gaussian();
    for (Index i = 0; i < kernel_len; ++i) v0(i, k) = init_rng.next_gaussian();
  }
  const auto init = project_unit_norm(RankOneConvDictionary(std::move(u0), std::move(v0)));

  detail::RecordSink sink(spec, "csc_record.csv", "csc_timing.jsonl");
  opt.row_sink = sink.sink();
  CscCmdResult result;
  result.csc = train_rank1_csc(init, data.signal, opt, truth);

  write_matrix(spec.path("dict_u.mat"), result.csc.dict.u());
  write_matrix(spec.path("dict_v.mat"), result.csc.dict.v());
  if (truth) {
    const auto score = recovery_score(*truth, result.csc.dict);
    CsvWriter out(spec.path("csc_scores.csv"), spec.meta(), {"metric", "value"});
    out.write_row({"u_corr", format_double(score.u_corr)});
    out.write_row({"v_corr", format_double(score.v_corr)});
    out.write_row({"mean_corr", format_double(score.mean)});
  }
  detail::register_checkpoints(spec, {"dict_u.mat", "dict_v.mat"});
  return result;
}

struct DenoiseCmdResult {
  std::vector<std::pair<int, double>> psnr_by_iters;  // (-1 marks the oracle row)
  double noisy_psnr = 0.0;
};

inline DenoiseCmdResult cmd_denoise(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"image", "patch", "n_patches", "atoms", "noise_var", "lambda",
                      "iters_list", "oracle_iters", "max_steps", "conv_tol", "patience"},
                     "denoise");
  if (!cfg.contains("image")) throw ConfigError("denoise: 'image' (PGM path) is required");
  const std::string image = cfg.at("image").get<std::string>();
  const Index patch = detail::get_or<Index>(cfg, "patch", 10);
  const Index n_patches = detail::get_or<Index>(cfg, "n_patches", 500);
  const Index atoms = detail::get_or<Index>(cfg, "atoms", 128);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
  const double lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  const std::vector<int> iters_list =
      detail::get_or<std::vector<int>>(cfg, "iters_list", {2, 5, 10, 20, 50});
  const int oracle_iters = detail::get_or<int>(cfg, "oracle_iters", 1000);
  const int max_steps = detail::get_or<int>(cfg, "max_steps", 100);
  const double conv_tol = detail::get_or<double>(cfg, "conv_tol", 1e-5);
  const int patience = detail::get_or<int>(cfg, "patience", 3);

  const CounterRng root(spec.seed);
  const auto set = load_pgm_patches(image, patch, n_patches, noise_var, root.stream(1).seed());

  DenoiseCmdResult result;
  result.noisy_psnr = psnr(set.clean, set.noisy, 1.0);

  // initial dictionary: random noisy patches, normalized
  CounterRng pick = root.stream(2);
  Mat init_atoms(patch * patch, atoms);
  for (Index k = 0; k < atoms; ++k) {
    init_atoms.col(k) =
        set.noisy.col(static_cast<Index>(pick.next_unit() * static_cast<double>(n_patches)));
  }
  const DenseDictionary init = project_unit_norm(DenseDictionary(std::move(init_atoms)));

  auto run_at = [&](int n_iters, Mode mode) {
    TrainOptions opt;
    opt.inner.lambda = lambda;
    opt.inner.n_iters = n_iters;
    opt.inner.algorithm = Algorithm::Fista;
    opt.mode = mode;
    opt.max_outer_steps = max_steps;
    opt.conv_tol = conv_tol;
    opt.patience = patience;
    opt.threads = spec.threads;
    const auto trained = train_full_batch(init, set.noisy, nullptr, opt);
    const Vec alphas = dense_batch::resolve_steps(trained.state.dict, opt.inner);
    const SparseCode codes =
        dense_batch::solve_batch(trained.state.dict, set.noisy, opt.inner, alphas, spec.threads);
    const Mat reconstructed = trained.state.dict.apply_batch(codes.values);
    return psnr(set.clean, reconstructed, 1.0);
  };

  CsvWriter out(spec.path("denoise_psnr.csv"), spec.meta(), {"n_iters", "kind", "psnr"});
  out.write_row({"0", "noisy_input", format_double(result.noisy_psnr)});
  for (int n : iters_list) {
    const double value = run_at(n, Mode::DDL);
    result.psnr_by_iters.push_back({n, value});
    out.write_row({std::to_string(n), "ddl", format_double(value)});
  }
  const double oracle = run_at(oracle_iters, Mode::AM);
  result.psnr_by_iters.push_back({-1, oracle});
  out.write_row({std::to_string(oracle_iters), "dl_oracle", format_double(oracle)});
  return result;
}

struct LinescanCmdResult {
  std::vector<LineScanPoint> curve;
  double loss_a = 0.0;
  double loss_b = 0.0;
};

inline LinescanCmdResult cmd_linescan(const ExperimentSpec& spec) {
  json cfg = spec.config;
  detail::check_keys(cfg,
                     {"m", "n", "t_samples", "sparsity", "sigma_z", "noise_var", "lambda",
                      "n_iters", "algorithm", "max_steps", "conv_tol", "patience", "n_points"},
                     "linescan");
  const Index m = detail::get_or<Index>(cfg, "m", 30);
  const Index n = detail::get_or<Index>(cfg, "n", 50);
  const Index t_samples = detail::get_or<Index>(cfg, "t_samples", 300);
  const double sparsity = detail::get_or<double>(cfg, "sparsity", 0.3);
  const double sigma_z = detail::get_or<double>(cfg, "sigma_z", 1.0);
  const double noise_var = detail::get_or<double>(cfg, "noise_var", 0.1);
  const int n_points = detail::get_or<int>(cfg, "n_points", 50);

  TrainOptions opt;
  opt.inner.lambda = detail::get_or<double>(cfg, "lambda", 0.1);
  opt.inner.n_iters = detail::get_or<int>(cfg, "n_iters", 20);
  opt.inner.algorithm =
      detail::parse_algorithm(detail::get_or<std::string>(cfg, "algorithm", "fista"));
  opt.mode = Mode::DDL;
  opt.max_outer_steps = detail::get_or<int>(cfg, "max_steps", 150);
  opt.conv_tol = detail::get_or<double>(cfg, "conv_tol", 1e-6);
  opt.patience = detail::get_or<int>(cfg, "patience", 5);
  opt.threads = spec.threads;

  const CounterRng root(spec.seed);
  const DenseDictionary truth = gen_gaussian_dict(m, n, root.stream(1).seed());
  const Mat codes = gen_bernoulli_gaussian(n, t_samples, sparsity, sigma_z, root.stream(2).seed());
  const Mat signals = gen_observations(truth, codes, noise_var, root.stream(3).seed());

  // two distinct random initializations
  const DenseDictionary init_a = gen_gaussian_dict(m, n, root.stream(10).seed());
  const DenseDictionary init_b = gen_gaussian_dict(m, n, root.stream(11).seed());
  const auto trained_a = train_full_batch(init_a, signals, &truth, opt);
  const auto trained_b = train_full_batch(init_b, signals, &truth, opt);

  LinescanCmdResult result;
  result.curve =
      loss_line_scan(trained_a.state.dict, trained_b.state.dict, signals, opt.inner, n_points,
                     spec.threads);
  result.loss_a = result.curve.front().loss;
  result.loss_b = result.curve.back().loss;

  // interpolation is raw (unprojected); noted in the metadata
  json extra;
  extra["projection"] = "none";
  extra["loss_a"] = result.loss_a;
  extra["loss_b"] = result.loss_b;
  CsvWriter out(spec.path("linescan.csv"), spec.meta(extra), {"t", "loss"});
  for (const auto& p : result.curve) {
    out.write_row({format_double(p.t), format_double(p.loss)});
  }
  write_matrix(spec.path("dict_a.mat"), trained_a.state.dict.data());
  write_matrix(spec.path("dict_b.mat"), trained_b.state.dict.data());
  detail::register_checkpoints(spec, {"dict_a.mat", "dict_b.mat"});
  return result;
}

// ---------------------------------------------------------------------------
// verify: recompute the spec hash from spec.json and check every emitted file
// ---------------------------------------------------------------------------

struct VerifyResult {
  int checked = 0;
  std::vector<std::string> failures;
};

inline VerifyResult verify_output_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path spec_path = fs::path(dir) / "spec.json";
  std::ifstream in(spec_path, std::ios::binary);
  if (!in) throw IoError(spec_path.string(), "spec.json not found");
  json doc = json::parse(in);
  ExperimentSpec spec;
  spec.command = doc.at("command").get<std::string>();
  spec.seed = doc.at("seed").get<std::uint64_t>();
  spec.config = doc.at("config");
  const std::string expected = hex64(spec.hash());

  VerifyResult result;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name == "spec.json") continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".csv" || ext == ".jsonl") {
      std::ifstream file(entry.path(), std::ios::binary);
      std::string first;
      std::getline(file, first);
      std::string payload = first;
      if (payload.rfind("# ", 0) == 0) payload = payload.substr(2);
      else if (payload.rfind("{\"meta\":", 0) == 0) {
        payload = payload.substr(8);
        if (!payload.empty() && payload.back() == '}') payload.pop_back();
      }
      ++result.checked;
      try {
        const json meta = json::parse(payload);
        if (meta.at("spec_hash").get<std::string>() != expected) {
          result.failures.push_back(name + ": spec hash mismatch");
        }
      } catch (const json::exception&) {
        result.failures.push_back(name + ": unparsable metadata header");
      }
    } else if (ext == ".mat") {
      ++result.checked;
      if (!doc.contains("checkpoints") || !doc.at("checkpoints").contains(name)) {
        result.failures.push_back(name + ": not registered in spec.json");
        continue;
      }
      if (doc.at("checkpoints").at(name).get<std::string>() !=
          hex64(detail::file_hash(entry.path().string()))) {
        result.failures.push_back(name + ": content hash mismatch");
      }
    }
  }
  return result;
}

/// Dispatch used by the CLI and by tests.
inline int run_command(ExperimentSpec spec) {
  std::filesystem::create_directories(spec.out_dir);
  spec.write_spec_file();
  if (spec.command == "jacobian") cmd_jacobian(spec);
  else if (spec.command == "gradients") cmd_gradients(spec);
  else if (spec.command == "train") cmd_train(spec);
  else if (spec.command == "sgd") cmd_sgd(spec);
  else if (spec.command == "csc") cmd_csc(spec);
  else if (spec.command == "denoise") cmd_denoise(spec);
  else if (spec.command == "linescan") cmd_linescan(spec);
  else throw ConfigError("unknown command '" + spec.command + "'");
  return 0;
}

}  // namespace udl
