#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "udl/csv.hpp"
#include "udl/datagen.hpp"
#include "udl/jacobian.hpp"
#include "udl/linops.hpp"
#include "udl/metrics.hpp"
#include "udl/parallel.hpp"
#include "udl/sparse_coding.hpp"

namespace udl {

enum class Mode { AM, DDL };

inline const char* mode_name(Mode m) { return m == Mode::AM ? "am" : "ddl"; }

struct LineSearchConfig {
  double initial_step = 0.0;          // <= 0: 10 / L of the current dictionary
  double backtrack_factor = 0.5;
  double sufficient_decrease = 1e-4;  // Armijo constant
  int max_backtracks = 30;
  double max_step_decay = 0.95;       // stochastic: per-epoch cap decay
  double step_reset_growth = 2.0;     // trial step growth between searches

  void validate() const {
    if (backtrack_factor <= 0.0 || backtrack_factor >= 1.0) {
      throw ConfigError("LineSearchConfig: backtrack_factor in (0,1)");
    }
    if (sufficient_decrease <= 0.0 || sufficient_decrease >= 1.0) {
      throw ConfigError("LineSearchConfig: sufficient_decrease in (0,1)");
    }
    if (max_backtracks <= 0) throw ConfigError("LineSearchConfig: max_backtracks positive");
    if (max_step_decay <= 0.0 || max_step_decay > 1.0) {
      throw ConfigError("LineSearchConfig: max_step_decay in (0,1]");
    }
    if (step_reset_growth < 1.0) throw ConfigError("LineSearchConfig: step_reset_growth >= 1");
  }
};

struct BacktrackOutcome {
  bool accepted = false;
  double step = 0.0;
  int trials = 0;
  double loss = 0.0;
};

/// Generic Armijo backtracking: tries trial_step * factor^k and accepts the
/// first candidate with loss <= current - c * step * ||g||^2.
template <class LossOfStep>
BacktrackOutcome armijo_backtrack(double current_loss, double grad_sq_norm, double trial_step,
                                  const LineSearchConfig& ls, LossOfStep&& loss_of_step) {
  BacktrackOutcome out;
  if (grad_sq_norm <= 0.0 || trial_step <= 0.0) return out;
  double step = trial_step;
  for (int k = 0; k <= ls.max_backtracks; ++k) {
    ++out.trials;
    const double candidate = loss_of_step(step);
    if (candidate <= current_loss - ls.sufficient_decrease * step * grad_sq_norm) {
      out.accepted = true;
      out.step = step;
      out.loss = candidate;
      return out;
    }
    step *= ls.backtrack_factor;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched dense gradient engines. Column blocks keep the GEMM sizes fixed, so
// gradients are bit-stable under any worker count; block partials combine in
// block order.
// ---------------------------------------------------------------------------

namespace dense_batch {

/// g^1 summed over the batch: (D Z_N - Y) Z_N^T.
inline Mat am_gradient(const DenseDictionary& dict, const Mat& Y, const UnrollConfig& cfg,
                       const Vec& alphas, int threads = 0) {
  const SparseCode z = solve_batch(dict, Y, cfg, alphas, threads);
  return (dict.data() * z.values - Y) * z.values.transpose();
}

struct BatchGradient {
  Mat grad;
  Vec alpha_grad;
  bool unstable = false;
};

inline constexpr Index kGradientBlock = 128;

/// g^2 summed over the batch via the reverse contraction, block by block.
inline BatchGradient ddl_gradient(const DenseDictionary& dict, const Mat& Y,
                                  const UnrollConfig& cfg, const Vec& alphas, int threads = 0,
                                  bool want_alpha_grad = false) {
  cfg.validate();
  const Mat& D = dict.data();
  const Index n = D.cols();
  const int depth = cfg.effective_depth();
  const int start = cfg.n_iters - depth;
  const bool momentum = cfg.algorithm == Algorithm::Fista;

  const Index n_blocks = Y.cols() <= 0 ? 0 : (Y.cols() + kGradientBlock - 1) / kGradientBlock;
  std::vector<Mat> grad_partials(static_cast<std::size_t>(n_blocks));
  std::vector<Vec> alpha_partials(static_cast<std::size_t>(n_blocks));
  std::vector<char> unstable_flags(static_cast<std::size_t>(n_blocks), 0);

  parallel_for_blocks(
      Y.cols(), kGradientBlock,
      [&](Index b, Index begin, Index end) {
        const Index width = end - begin;
        const auto Yb = Y.middleCols(begin, width);

        std::vector<Mat> z_hist;  // z_start .. z_N (block)
        std::vector<Mat> x_hist;  // x_{start+1} .. x_N
        std::vector<double> t_seq(1, 1.0);
        z_hist.reserve(static_cast<std::size_t>(depth) + 1);
        x_hist.reserve(static_cast<std::size_t>(depth));

        Mat Z = Mat::Zero(n, width);
        Mat X = Z;
        double t = 1.0;
        if (start == 0) z_hist.push_back(Z);
        for (int iter = 0; iter < cfg.n_iters; ++iter) {
          const double alpha = alphas[iter];
          Mat x_next = soft_threshold(Z - alpha * (D.transpose() * (D * Z - Yb)),
                                      cfg.lambda * alpha);
          if (momentum) {
            const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
            Z = x_next + ((t - 1.0) / t_next) * (x_next - X);
            X = x_next;
            t = t_next;
          } else {
            Z = x_next;
          }
          t_seq.push_back(t);
          if (iter + 1 > start) {
            x_hist.push_back(std::move(x_next));
            z_hist.push_back(Z);
          } else if (iter + 1 == start) {
            z_hist.push_back(Z);
          }
        }

        Vec alpha_b = Vec::Zero(cfg.n_iters);
        const Mat r_final = D * Z - Yb;
        Mat grad_b = r_final * Z.transpose();
        Mat AZ = D.transpose() * r_final + cfg.lambda * Z.array().sign().matrix();
        Mat AZ_next;
        for (int k = cfg.n_iters; k > start; --k) {
          const std::size_t zi = static_cast<std::size_t>(k - start);
          const Mat& X_k = x_hist[zi - 1];
          const Mat& Z_prev = z_hist[zi - 1];
          const double alpha = alphas[k - 1];
          Mat ax = AZ;
          if (momentum) {
            const double c_prev = (t_seq[static_cast<std::size_t>(k - 1)] - 1.0) /
                                  t_seq[static_cast<std::size_t>(k)];
            ax = (1.0 + c_prev) * AZ;
            if (k < cfg.n_iters) {
              const double c_k = (t_seq[static_cast<std::size_t>(k)] - 1.0) /
                                 t_seq[static_cast<std::size_t>(k + 1)];
              ax -= c_k * AZ_next;
            }
          }
          const Mat Q = ((X_k.array() != 0.0).cast<double>() * ax.array()).matrix();
          const Mat r_prev = D * Z_prev - Yb;
          grad_b.noalias() -= alpha * (r_prev * Q.transpose());
          grad_b.noalias() -= alpha * ((D * Q) * Z_prev.transpose());
          if (want_alpha_grad) {
            alpha_b[k - 1] = -((Q.array() * ((D.transpose() * r_prev).array() +
                                             cfg.lambda * X_k.array().sign()))
                                   .sum());
          }
          AZ_next = AZ;
          AZ = Q - alpha * (D.transpose() * (D * Q));
        }
        if (!grad_b.allFinite()) unstable_flags[static_cast<std::size_t>(b)] = 1;
        grad_partials[static_cast<std::size_t>(b)] = std::move(grad_b);
        alpha_partials[static_cast<std::size_t>(b)] = std::move(alpha_b);
      },
      threads);

  BatchGradient out;
  out.grad = Mat::Zero(D.rows(), D.cols());
  out.alpha_grad = Vec::Zero(cfg.n_iters);
  for (Index b = 0; b < n_blocks; ++b) {
    out.grad += grad_partials[static_cast<std::size_t>(b)];
    out.alpha_grad += alpha_partials[static_cast<std::size_t>(b)];
    out.unstable = out.unstable || unstable_flags[static_cast<std::size_t>(b)] != 0;
  }
  if (!out.grad.allFinite()) out.unstable = true;
  return out;
}

}  // namespace dense_batch

/// Batch outer gradient: g^1 for AM, g^2 for DDL, summed over batch columns
/// in deterministic order.
inline GradientEstimate outer_gradient(Mode mode, const DenseDictionary& dict, const Mat& Y,
                                       const UnrollConfig& cfg, int threads = 0) {
  require_shape(Y.cols() > 0, "outer_gradient: empty batch");
  const Vec alphas = dense_batch::resolve_steps(dict, cfg);
  if (mode == Mode::AM) {
    Mat g = dense_batch::am_gradient(dict, Y, cfg, alphas, threads);
    const bool unstable = !g.allFinite();
    return {std::move(g), GradientKind::Analytic, cfg.n_iters, kFullDepth, unstable};
  }
  auto r = dense_batch::ddl_gradient(dict, Y, cfg, alphas, threads);
  return {std::move(r.grad), GradientKind::Unrolled, cfg.n_iters, cfg.truncation_depth,
          r.unstable};
}

struct TrainOptions {
  UnrollConfig inner;
  LineSearchConfig line_search;
  Mode mode = Mode::DDL;
  int max_outer_steps = 500;
  double conv_tol = 1e-6;  // relative loss change
  int patience = 5;        // consecutive accepted steps below tol
  bool learn_steps = false;
  int phase2_max_steps = 200;
  double stop_at_score = -1.0;
  int threads = 0;
  /// Called after every recorded step (crash-safe CSV appends).
  std::function<void(const RecordRow&)> row_sink;
};

struct TrainState {
  DenseDictionary dict;
  Vec learned_steps;  // empty until phase 2
  int step = 0;
  int epoch = 0;
  int phase = 1;
  Mode mode = Mode::DDL;
  std::vector<double> loss_history;
  std::vector<double> score_history;
  double max_step = 0.0;  // stochastic cap
};

struct TrainResult {
  TrainState state;
  RunRecord record;
  int gradient_steps_phase1 = 0;
  int gradient_steps_total = 0;
  bool no_progress = false;
  bool aborted_unstable = false;
  double final_loss = 0.0;
};

namespace detail {

inline double default_initial_step(const DenseDictionary& dict, const LineSearchConfig& ls) {
  if (ls.initial_step > 0.0) return ls.initial_step;
  const LipschitzEstimate est = lipschitz(dict);
  return est.value > 0.0 ? 10.0 / est.value : 1.0;
}

inline double elapsed_seconds(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// One projected-gradient step with Armijo backtracking on F_N. Candidates
/// are D' = project(D - step g); acceptance needs
/// F_N(D') <= F_N(D) - c step ||g||^2.
struct DictStepOutcome {
  bool accepted = false;
  DenseDictionary dict;
  double step = 0.0;
  int trials = 0;
  double loss = 0.0;
};

inline DictStepOutcome backtracking_step(const DenseDictionary& dict, const Mat& grad,
                                         const Mat& Y, const UnrollConfig& cfg,
                                         const LineSearchConfig& ls, double current_loss,
                                         double trial_step, std::uint64_t salt, int threads = 0) {
  DictStepOutcome out;
  const double grad_sq = grad.squaredNorm();
  DenseDictionary best;
  const auto outcome = armijo_backtrack(
      current_loss, grad_sq, trial_step, ls, [&](double step) {
        DenseDictionary candidate =
            project_unit_norm(DenseDictionary(dict.data() - step * grad), nullptr, salt);
        const double loss = dense_batch::unrolled_loss(candidate, Y, cfg, threads);
        best = std::move(candidate);
        return loss;
      });
  out.accepted = outcome.accepted;
  out.step = outcome.step;
  out.trials = outcome.trials;
  out.loss = outcome.loss;
  if (outcome.accepted) out.dict = std::move(best);
  return out;
}

/// Two-phase full-batch training: phase 1 runs projected gradient descent
/// with fixed steps 1/L (L recomputed after every dictionary update); phase 2
/// optionally learns the per-layer steps jointly with the dictionary, still
/// under line-search acceptance.
inline TrainResult train_full_batch(const DenseDictionary& init, const Mat& Y,
                                    const DenseDictionary* ground_truth,
                                    const TrainOptions& opt) {
  opt.inner.validate();
  opt.line_search.validate();
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result;
  TrainState& state = result.state;
  state.dict = init;
  state.mode = opt.mode;

  UnrollConfig cfg = opt.inner;
  double trial_step = detail::default_initial_step(state.dict, opt.line_search);
  double last_accepted = trial_step;

  auto score_of = [&](const DenseDictionary& d) {
    return ground_truth ? recovery_score(*ground_truth, d)
                        : std::numeric_limits<double>::quiet_NaN();
  };

  auto run_phase = [&](int phase, int max_steps) {
    int calm = 0;
    cfg = opt.inner;
    if (phase == 2) cfg.learned_steps = state.learned_steps;
    double loss = dense_batch::unrolled_loss(state.dict, Y, cfg, opt.threads);
    for (int it = 0; it < max_steps; ++it) {
      const Vec alphas = dense_batch::resolve_steps(state.dict, cfg);
      Mat grad;
      Vec alpha_grad;
      bool unstable = false;
      if (phase == 2) {
        auto g2 = dense_batch::ddl_gradient(state.dict, Y, cfg, alphas, opt.threads, true);
        unstable = g2.unstable;
        alpha_grad = std::move(g2.alpha_grad);
        if (opt.mode == Mode::AM) {
          grad = dense_batch::am_gradient(state.dict, Y, cfg, alphas, opt.threads);
        } else {
          grad = std::move(g2.grad);
        }
      } else if (opt.mode == Mode::AM) {
        grad = dense_batch::am_gradient(state.dict, Y, cfg, alphas, opt.threads);
      } else {
        auto g2 = dense_batch::ddl_gradient(state.dict, Y, cfg, alphas, opt.threads);
        unstable = g2.unstable;
        grad = std::move(g2.grad);
      }
      if (unstable || !grad.allFinite()) {
        result.aborted_unstable = true;
        RecordRow row;
        row.step = state.step;
        row.phase = phase;
        row.loss = loss;
        row.flags = 2;
        row.seconds = detail::elapsed_seconds(t0);
        result.record.rows.push_back(row);
        if (opt.row_sink) opt.row_sink(row);
        return;
      }

      const double grad_sq =
          grad.squaredNorm() + (phase == 2 ? alpha_grad.squaredNorm() : 0.0);
      if (grad_sq == 0.0) {
        result.no_progress = true;
        return;
      }

      DenseDictionary candidate;
      Vec candidate_steps;
      const double start_step =
          std::min(trial_step, last_accepted * opt.line_search.step_reset_growth);
      const auto outcome = armijo_backtrack(
          loss, grad_sq, start_step, opt.line_search, [&](double step) {
            candidate = project_unit_norm(
                DenseDictionary(state.dict.data() - step * grad), nullptr,
                static_cast<std::uint64_t>(state.step) + 1);
            UnrollConfig c2 = cfg;
            if (phase == 2) {
              candidate_steps =
                  (state.learned_steps - step * alpha_grad).cwiseMax(1e-3 * alphas[0]);
              c2.learned_steps = candidate_steps;
            }
            return dense_batch::unrolled_loss(candidate, Y, c2, opt.threads);
          });
      if (!outcome.accepted) {
        result.no_progress = true;
        return;
      }

      const double prev_loss = loss;
      loss = outcome.loss;
      state.dict = std::move(candidate);
      if (phase == 2) {
        state.learned_steps = candidate_steps;
        cfg.learned_steps = state.learned_steps;
      }
      last_accepted = outcome.step;
      ++state.step;
      if (phase == 1) ++result.gradient_steps_phase1;
      ++result.gradient_steps_total;

      RecordRow row;
      row.step = state.step;
      row.phase = phase;
      row.loss = loss;
      row.score = score_of(state.dict);
      row.backtracks = outcome.trials;
      row.step_size = outcome.step;
      row.grad_norm = std::sqrt(grad_sq);
      row.seconds = detail::elapsed_seconds(t0);
      result.record.rows.push_back(row);
      if (opt.row_sink) opt.row_sink(row);
      state.loss_history.push_back(loss);
      state.score_history.push_back(row.score);

      if (ground_truth && opt.stop_at_score > 0.0 && row.score >= opt.stop_at_score) return;
      const double rel = std::abs(prev_loss - loss) / std::max(std::abs(prev_loss), 1e-300);
      calm = rel < opt.conv_tol ? calm + 1 : 0;
      if (calm >= opt.patience) return;
    }
  };

  state.phase = 1;
  run_phase(1, opt.max_outer_steps);
  result.final_loss = state.loss_history.empty() ? dense_batch::unrolled_loss(state.dict, Y, cfg, opt.threads)
                                                 : state.loss_history.back();

  if (opt.learn_steps && !result.aborted_unstable) {
    state.phase = 2;
    result.no_progress = false;
    const Vec alphas = dense_batch::resolve_steps(state.dict, opt.inner);
    state.learned_steps = alphas.head(opt.inner.n_iters);
    run_phase(2, opt.phase2_max_steps);
    if (!state.loss_history.empty()) result.final_loss = state.loss_history.back();
  }
  return result;
}

struct StochasticOptions {
  UnrollConfig inner;
  LineSearchConfig line_search;
  Mode mode = Mode::DDL;
  Index minibatch = 500;
  int epochs = 10;
  int iters_per_epoch = 100;
  double stop_at_score = -1.0;
  int threads = 0;
  std::uint64_t seed = 0;
  std::function<void(const RecordRow&)> row_sink;
};

/// Stochastic line-search training: every iteration draws a minibatch
/// (without replacement within a pass, reshuffled when exhausted), computes
/// the batch gradient and backtracks against the minibatch loss. The maximal
/// allowed step decays by max_step_decay after every epoch.
inline TrainResult train_stochastic(const DenseDictionary& init, const Mat& Y,
                                    const DenseDictionary* ground_truth,
                                    const StochasticOptions& opt) {
  opt.inner.validate();
  opt.line_search.validate();
  require_shape(opt.minibatch >= 1 && opt.minibatch <= Y.cols(),
                "train_stochastic: minibatch size " + std::to_string(opt.minibatch) +
                    " out of range for " + std::to_string(Y.cols()) + " samples");
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result;
  TrainState& state = result.state;
  state.dict = init;
  state.mode = opt.mode;
  state.max_step = detail::default_initial_step(state.dict, opt.line_search);
  double last_accepted = state.max_step;

  CounterRng shuffle_rng = CounterRng(opt.seed).stream(0xB4C7);
  std::vector<Index> order(static_cast<std::size_t>(Y.cols()));
  std::iota(order.begin(), order.end(), Index{0});
  std::size_t cursor = order.size();  // force initial shuffle
  auto draw_minibatch = [&]() {
    Mat batch(Y.rows(), opt.minibatch);
    for (Index i = 0; i < opt.minibatch; ++i) {
      if (cursor >= order.size()) {
        for (std::size_t j = order.size(); j > 1; --j) {
          const std::size_t k = static_cast<std::size_t>(shuffle_rng.next_unit() *
                                                         static_cast<double>(j));
          std::swap(order[j - 1], order[std::min(k, j - 1)]);
        }
        cursor = 0;
      }
      batch.col(i) = Y.col(order[cursor++]);
    }
    return batch;
  };

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    state.epoch = epoch;
    for (int it = 0; it < opt.iters_per_epoch; ++it) {
      const Mat batch = draw_minibatch();
      const Vec alphas = dense_batch::resolve_steps(state.dict, opt.inner);
      Mat grad;
      bool unstable = false;
      if (opt.mode == Mode::AM) {
        grad = dense_batch::am_gradient(state.dict, batch, opt.inner, alphas, opt.threads);
      } else {
        auto g2 = dense_batch::ddl_gradient(state.dict, batch, opt.inner, alphas, opt.threads);
        unstable = g2.unstable;
        grad = std::move(g2.grad);
      }
      if (unstable || !grad.allFinite()) {
        result.aborted_unstable = true;
        return result;
      }
      const double grad_sq = grad.squaredNorm();
      if (grad_sq == 0.0) continue;

      const double batch_loss =
          dense_batch::unrolled_loss(state.dict, batch, opt.inner, alphas, opt.threads);
      const double start_step =
          std::min(state.max_step, last_accepted * opt.line_search.step_reset_growth);
      DenseDictionary candidate;
      const auto outcome = armijo_backtrack(
          batch_loss, grad_sq, start_step, opt.line_search, [&](double step) {
            candidate = project_unit_norm(
                DenseDictionary(state.dict.data() - step * grad), nullptr,
                static_cast<std::uint64_t>(state.step) + 1);
            return dense_batch::unrolled_loss(candidate, batch, opt.inner, opt.threads);
          });
      ++state.step;
      if (outcome.accepted) {
        state.dict = std::move(candidate);
        last_accepted = outcome.step;
      }

      RecordRow row;
      row.step = state.step;
      row.epoch = epoch;
      row.loss = outcome.accepted ? outcome.loss : batch_loss;
      row.score = ground_truth ? recovery_score(*ground_truth, state.dict)
                               : std::numeric_limits<double>::quiet_NaN();
      row.backtracks = outcome.trials;
      row.step_size = outcome.accepted ? outcome.step : 0.0;
      row.grad_norm = std::sqrt(grad_sq);
      row.flags = outcome.accepted ? 0 : 1;
      row.seconds = detail::elapsed_seconds(t0);
      result.record.rows.push_back(row);
      if (opt.row_sink) opt.row_sink(row);
      state.loss_history.push_back(row.loss);
      state.score_history.push_back(row.score);
      ++result.gradient_steps_total;

      if (ground_truth && opt.stop_at_score > 0.0 && row.score >= opt.stop_at_score) {
        result.final_loss = row.loss;
        return result;
      }
    }
    state.max_step *= opt.line_search.max_step_decay;
  }
  if (!state.loss_history.empty()) result.final_loss = state.loss_history.back();
  return result;
}

struct CscOptions {
  UnrollConfig inner;          // inner.lambda is ignored; lambda_frac scales lambda_max
  LineSearchConfig line_search;
  double lambda_frac = 0.3;
  Index window = 256;
  Index windows_per_batch = 10;
  int epochs = 10;
  int iters_per_epoch = 10;
  double stop_at_score = -1.0;
  int threads = 0;
  std::uint64_t seed = 0;
  std::function<void(const RecordRow&)> row_sink;
};

struct CscResult {
  RankOneConvDictionary dict;
  RunRecord record;
  int gradient_steps_total = 0;
  double final_loss = 0.0;
  RankOneScore final_score;
};

/// Stochastic DDL for the rank-1 multivariate convolutional model: each
/// iteration samples signal windows (overlap allowed), sparse-codes them with
/// the unrolled solver at lambda = lambda_frac * lambda_max(window), and
/// takes one projected line-search step on (u, v) jointly.
inline CscResult train_rank1_csc(const RankOneConvDictionary& init, const Mat& signal,
                                 const CscOptions& opt,
                                 const RankOneConvDictionary* ground_truth) {
  opt.inner.validate();
  opt.line_search.validate();
  require_shape(opt.window >= init.kernel_length(),
                "train_rank1_csc: window " + std::to_string(opt.window) +
                    " shorter than kernel length " + std::to_string(init.kernel_length()));
  require_shape(signal.cols() >= opt.window, "train_rank1_csc: signal shorter than window");
  const auto t0 = std::chrono::steady_clock::now();

  CscResult result;
  result.dict = init;
  CounterRng window_rng = CounterRng(opt.seed).stream(0xC5C);

  const Index la = opt.window - init.kernel_length() + 1;
  const Mat code_like = Mat::Zero(init.atom_count(), la);
  double max_step = opt.line_search.initial_step > 0.0 ? opt.line_search.initial_step : 10.0;
  double last_accepted = max_step;
  int step_counter = 0;

  auto minibatch_loss = [&](const RankOneConvDictionary& dict,
                            const std::vector<Mat>& windows, const std::vector<double>& lambdas) {
    std::vector<double> partial(windows.size(), 0.0);
    parallel_for_blocks(
        static_cast<Index>(windows.size()), 1,
        [&](Index b, Index begin, Index) {
          UnrollConfig cfg = opt.inner;
          cfg.lambda = lambdas[static_cast<std::size_t>(begin)];
          auto solved = solve(dict, windows[static_cast<std::size_t>(begin)], code_like, cfg,
                              TraceOptions{.costs = false});
          partial[static_cast<std::size_t>(b)] =
              lasso_cost(dict, solved.code, windows[static_cast<std::size_t>(begin)], cfg.lambda);
        },
        opt.threads);
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
  };

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (int it = 0; it < opt.iters_per_epoch; ++it) {
      std::vector<Mat> windows;
      windows.reserve(static_cast<std::size_t>(opt.windows_per_batch));
      for (Index w = 0; w < opt.windows_per_batch; ++w) {
        const Index offset = static_cast<Index>(
            window_rng.next_unit() * static_cast<double>(signal.cols() - opt.window + 1));
        windows.push_back(signal.middleCols(offset, opt.window));
      }
      // Lambda per window from the current dictionary, held fixed through the
      // line search so all candidates minimize the same objective.
      std::vector<double> lambdas(windows.size());
      for (std::size_t w = 0; w < windows.size(); ++w) {
        lambdas[w] = opt.lambda_frac * lambda_max(result.dict, windows[w]);
      }

      std::vector<RankOneConvDictionary::ParamGrad> grads(windows.size());
      std::vector<double> costs(windows.size(), 0.0);
      parallel_for_blocks(
          static_cast<Index>(windows.size()), 1,
          [&](Index b, Index begin, Index) {
            UnrollConfig cfg = opt.inner;
            cfg.lambda = lambdas[static_cast<std::size_t>(begin)];
            auto g = unrolled_param_gradient(result.dict, windows[static_cast<std::size_t>(begin)],
                                             code_like, cfg);
            grads[static_cast<std::size_t>(b)] = std::move(g.grad);
            costs[static_cast<std::size_t>(b)] = g.cost;
          },
          opt.threads);
      RankOneConvDictionary::ParamGrad grad = result.dict.zero_param_grad();
      double batch_loss = 0.0;
      for (std::size_t w = 0; w < windows.size(); ++w) {
        grad.u += grads[w].u;
        grad.v += grads[w].v;
        batch_loss += costs[w];
      }
      const double grad_sq = grad.u.squaredNorm() + grad.v.squaredNorm();
      if (grad_sq == 0.0 || !grad.u.allFinite() || !grad.v.allFinite()) continue;

      const double start_step =
          std::min(max_step, last_accepted * opt.line_search.step_reset_growth);
      RankOneConvDictionary candidate;
      const auto outcome = armijo_backtrack(
          batch_loss, grad_sq, start_step, opt.line_search, [&](double step) {
            candidate = project_unit_norm(result.dict.retract(grad, step), nullptr,
                                          static_cast<std::uint64_t>(step_counter) + 1);
            return minibatch_loss(candidate, windows, lambdas);
          });
      ++step_counter;
      if (outcome.accepted) {
        result.dict = std::move(candidate);
        last_accepted = outcome.step;
      }

      RecordRow row;
      row.step = step_counter;
      row.epoch = epoch;
      row.loss = outcome.accepted ? outcome.loss : batch_loss;
      row.backtracks = outcome.trials;
      row.step_size = outcome.accepted ? outcome.step : 0.0;
      row.grad_norm = std::sqrt(grad_sq);
      row.flags = outcome.accepted ? 0 : 1;
      row.seconds = detail::elapsed_seconds(t0);
      if (ground_truth) {
        const RankOneScore score = recovery_score(*ground_truth, result.dict);
        row.score = score.mean;
        result.final_score = score;
      }
      result.record.rows.push_back(row);
      if (opt.row_sink) opt.row_sink(row);
      ++result.gradient_steps_total;
      result.final_loss = row.loss;
      if (ground_truth && opt.stop_at_score > 0.0 && row.score >= opt.stop_at_score) return result;
    }
    max_step *= opt.line_search.max_step_decay;
  }
  return result;
}

}  // namespace udl
