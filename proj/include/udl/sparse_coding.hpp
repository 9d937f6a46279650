#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "udl/core.hpp"
#include "udl/linops.hpp"
#include "udl/parallel.hpp"

namespace udl {

enum class Algorithm { Ista, Fista };

inline const char* algorithm_name(Algorithm a) {
  return a == Algorithm::Ista ? "ista" : "fista";
}

/// Full back-propagation / no truncation sentinel.
inline constexpr int kFullDepth = -1;

struct UnrollConfig {
  int n_iters = 0;
  Algorithm algorithm = Algorithm::Ista;
  double lambda = 0.1;
  /// Empty: fixed step 1/L from power iteration. Otherwise one positive step
  /// per layer; the layer threshold is lambda * alpha_n so every layer stays
  /// a valid proximal step.
  std::optional<Vec> learned_steps;
  int truncation_depth = kFullDepth;
  double support_tol = 0.0;
  double divergence_norm = 1e8;
  double lipschitz_tol = 1e-6;
  int lipschitz_iters = 100;

  void validate() const {
    if (n_iters < 0) throw ConfigError("UnrollConfig: n_iters must be >= 0");
    if (!(lambda > 0.0)) throw ConfigError("UnrollConfig: lambda must be positive");
    if (learned_steps) {
      if (learned_steps->size() != n_iters) {
        throw ConfigError("UnrollConfig: expected " + std::to_string(n_iters) +
                          " learned steps, got " + std::to_string(learned_steps->size()));
      }
      if ((learned_steps->array() <= 0.0).any()) {
        throw ConfigError("UnrollConfig: learned steps must be strictly positive");
      }
    }
    if (truncation_depth != kFullDepth &&
        (truncation_depth < 0 || truncation_depth > n_iters)) {
      throw ConfigError("UnrollConfig: truncation depth must lie in [0, n_iters]");
    }
    if (support_tol < 0.0) throw ConfigError("UnrollConfig: support_tol must be >= 0");
  }

  int effective_depth() const { return truncation_depth == kFullDepth ? n_iters : truncation_depth; }
};

/// sign(v) .* max(|v| - mu, 0), applied coefficient-wise.
template <class Derived>
auto soft_threshold(const Eigen::MatrixBase<Derived>& v, double mu) {
  return ((v.array().abs() - mu).max(0.0) * v.array().sign()).matrix();
}

/// Indices (flattened in storage order, ascending) with |z_i| > tol.
template <class Derived>
std::vector<Index> support(const Eigen::MatrixBase<Derived>& code, double tol = 0.0) {
  std::vector<Index> idx;
  Index i = 0;
  for (Index c = 0; c < code.cols(); ++c) {
    for (Index r = 0; r < code.rows(); ++r, ++i) {
      if (std::abs(code(r, c)) > tol) idx.push_back(i);
    }
  }
  return idx;
}

template <DictionaryOperator D>
double lasso_cost(const D& dict, const typename D::Code& code, const typename D::Signal& y,
                  double lambda) {
  const typename D::Signal residual = dict.apply(code) - y;
  return 0.5 * residual.squaredNorm() + lambda * code.template lpNorm<1>();
}

/// Smallest regularization for which the Lasso solution is identically zero.
template <DictionaryOperator D>
double lambda_max(const D& dict, const typename D::Signal& y) {
  return dict.adjoint(y).template lpNorm<Eigen::Infinity>();
}

struct TraceOptions {
  bool costs = true;
  bool supports = false;
  bool snapshots = false;
};

template <class Code>
struct IterateTrace {
  std::vector<double> costs;                   // F(z_n), n = 0..N
  std::vector<std::vector<Index>> supports;    // support(z_n)
  std::vector<Code> iterates;                  // z_0..z_N when snapshots on
  std::vector<Code> aux_iterates;              // FISTA x_0..x_N
  std::vector<double> t_sequence;              // FISTA momentum t_0..t_N
  Vec alphas;                                  // per-layer steps actually used
  double lipschitz = 0.0;
};

template <DictionaryOperator D>
struct SolveResult {
  typename D::Code code;
  IterateTrace<typename D::Code> trace;
};

namespace detail {

template <class Code>
void guard_iterate(const Code& z, int iteration, double limit) {
  if (!z.allFinite()) {
    throw DivergenceError(iteration, "solver diverged: non-finite iterate at iteration " +
                                         std::to_string(iteration));
  }
  const double norm = z.norm();
  if (norm > limit) {
    throw DivergenceError(iteration, "solver diverged: iterate norm " + std::to_string(norm) +
                                         " exceeds guard at iteration " +
                                         std::to_string(iteration));
  }
}

template <DictionaryOperator D>
Vec resolve_steps(const D& dict, const typename D::Code& code_like, const UnrollConfig& cfg,
                  double* lipschitz_out) {
  if (cfg.learned_steps) {
    if (lipschitz_out) *lipschitz_out = 0.0;
    return *cfg.learned_steps;
  }
  const LipschitzEstimate est =
      lipschitz(dict, code_like, cfg.lipschitz_tol, cfg.lipschitz_iters);
  if (est.zero_operator || est.value <= 0.0) {
    throw DivergenceError(0, "cannot take step 1/L: dictionary has zero operator norm");
  }
  if (lipschitz_out) *lipschitz_out = est.value;
  return Vec::Constant(std::max(cfg.n_iters, 1), 1.0 / est.value);
}

}  // namespace detail

/// Proximal gradient descent for the Lasso from z_0 = 0:
///   z_{n+1} = ST_{lambda * a_{n+1}}(z_n - a_{n+1} D^T(D z_n - y)).
template <DictionaryOperator D>
SolveResult<D> ista(const D& dict, const typename D::Signal& y, const typename D::Code& code_like,
                    const UnrollConfig& cfg, const TraceOptions& want = {}) {
  using Code = typename D::Code;
  cfg.validate();
  SolveResult<D> result;
  auto& trace = result.trace;
  trace.alphas = detail::resolve_steps(dict, code_like, cfg, &trace.lipschitz);

  Code z = code_like;
  z.setZero();
  auto record = [&](const Code& zn) {
    if (want.costs) trace.costs.push_back(lasso_cost(dict, zn, y, cfg.lambda));
    if (want.supports) trace.supports.push_back(support(zn, cfg.support_tol));
    if (want.snapshots) trace.iterates.push_back(zn);
  };
  record(z);

  for (int n = 0; n < cfg.n_iters; ++n) {
    const double alpha = trace.alphas[n];
    const Code grad = dict.adjoint(dict.apply(z) - y);
    z = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
    detail::guard_iterate(z, n + 1, cfg.divergence_norm);
    record(z);
  }
  result.code = std::move(z);
  return result;
}

/// FISTA (Nesterov momentum) from z_0 = x_0 = 0, t_0 = 1.
template <DictionaryOperator D>
SolveResult<D> fista(const D& dict, const typename D::Signal& y, const typename D::Code& code_like,
                     const UnrollConfig& cfg, const TraceOptions& want = {}) {
  using Code = typename D::Code;
  cfg.validate();
  SolveResult<D> result;
  auto& trace = result.trace;
  trace.alphas = detail::resolve_steps(dict, code_like, cfg, &trace.lipschitz);

  Code z = code_like;
  z.setZero();
  Code x = z;
  double t = 1.0;
  auto record = [&](const Code& zn, const Code& xn, double tn) {
    if (want.costs) trace.costs.push_back(lasso_cost(dict, zn, y, cfg.lambda));
    if (want.supports) trace.supports.push_back(support(zn, cfg.support_tol));
    if (want.snapshots) {
      trace.iterates.push_back(zn);
      trace.aux_iterates.push_back(xn);
    }
    trace.t_sequence.push_back(tn);
  };
  record(z, x, t);

  for (int n = 0; n < cfg.n_iters; ++n) {
    const double alpha = trace.alphas[n];
    const Code grad = dict.adjoint(dict.apply(z) - y);
    const Code x_next = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    z = x_next + ((t - 1.0) / t_next) * (x_next - x);
    x = x_next;
    t = t_next;
    detail::guard_iterate(z, n + 1, cfg.divergence_norm);
    record(z, x, t);
  }
  result.code = std::move(z);
  return result;
}

template <DictionaryOperator D>
SolveResult<D> solve(const D& dict, const typename D::Signal& y, const typename D::Code& code_like,
                     const UnrollConfig& cfg, const TraceOptions& want = {}) {
  return cfg.algorithm == Algorithm::Ista ? ista(dict, y, code_like, cfg, want)
                                          : fista(dict, y, code_like, cfg, want);
}

inline SolveResult<DenseDictionary> solve(const DenseDictionary& dict, const Vec& y,
                                          const UnrollConfig& cfg, const TraceOptions& want = {}) {
  return solve(dict, y, dict.zero_code(), cfg, want);
}

/// Batch of codes (one column per sample) plus the support tolerance used to
/// read supports off it.
struct SparseCode {
  Mat values;
  double support_tol = 0.0;

  std::vector<Index> support_of(Index sample) const {
    return udl::support(values.col(sample), support_tol);
  }
};

namespace dense_batch {

inline constexpr Index kColumnBlock = 512;

/// Per-layer steps (and the backing Lipschitz estimate) for a dense batch.
inline Vec resolve_steps(const DenseDictionary& dict, const UnrollConfig& cfg,
                         double* lipschitz_out = nullptr) {
  return udl::detail::resolve_steps(dict, dict.zero_code(), cfg, lipschitz_out);
}

/// Runs the unrolled solver on one block of signal columns.
inline Mat solve_columns(const Mat& D, const Eigen::Ref<const Mat>& Yb, const UnrollConfig& cfg,
                         const Vec& alphas) {
  Mat Z = Mat::Zero(D.cols(), Yb.cols());
  Mat X = Z;
  double t = 1.0;
  const bool momentum = cfg.algorithm == Algorithm::Fista;
  for (int n = 0; n < cfg.n_iters; ++n) {
    const double alpha = alphas[n];
    Mat step = Z - alpha * (D.transpose() * (D * Z - Yb));
    if (momentum) {
      Mat x_next = soft_threshold(step, cfg.lambda * alpha);
      const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
      Z = x_next + ((t - 1.0) / t_next) * (x_next - X);
      X = std::move(x_next);
      t = t_next;
    } else {
      Z = soft_threshold(step, cfg.lambda * alpha);
    }
    if (!Z.allFinite() || Z.norm() > cfg.divergence_norm) {
      throw DivergenceError(n + 1,
                            "solve_batch diverged at iteration " + std::to_string(n + 1));
    }
  }
  return Z;
}

/// Unrolled solve over all columns of Y at once. Column blocks of fixed width
/// run in parallel; each block is a plain matrix iteration, so results do not
/// depend on the worker count.
inline SparseCode solve_batch(const DenseDictionary& dict, const Mat& Y, const UnrollConfig& cfg,
                              const Vec& alphas, int threads = 0) {
  cfg.validate();
  require_shape(Y.rows() == dict.signal_dim(),
                "solve_batch: signals " + shape_str(Y.rows(), Y.cols()) +
                    " do not match dictionary " +
                    shape_str(dict.signal_dim(), dict.atom_count()));
  SparseCode out{Mat::Zero(dict.atom_count(), Y.cols()), cfg.support_tol};
  parallel_for_blocks(
      Y.cols(), kColumnBlock,
      [&](Index, Index begin, Index end) {
        out.values.middleCols(begin, end - begin) =
            solve_columns(dict.data(), Y.middleCols(begin, end - begin), cfg, alphas);
      },
      threads);
  return out;
}

inline SparseCode solve_batch(const DenseDictionary& dict, const Mat& Y, const UnrollConfig& cfg,
                              int threads = 0) {
  return solve_batch(dict, Y, cfg, resolve_steps(dict, cfg), threads);
}

/// Lasso objective summed over sample columns.
inline double batch_cost(const DenseDictionary& dict, const Mat& Z, const Mat& Y, double lambda) {
  return 0.5 * (dict.data() * Z - Y).squaredNorm() + lambda * Z.lpNorm<1>();
}

/// F_N(D): solve the batch at N unrolled iterations, then evaluate the
/// objective at the result. The workhorse of outer line searches.
inline double unrolled_loss(const DenseDictionary& dict, const Mat& Y, const UnrollConfig& cfg,
                            const Vec& alphas, int threads = 0) {
  std::vector<double> partial(
      static_cast<std::size_t>((Y.cols() + kColumnBlock - 1) / kColumnBlock), 0.0);
  parallel_for_blocks(
      Y.cols(), kColumnBlock,
      [&](Index b, Index begin, Index end) {
        const auto Yb = Y.middleCols(begin, end - begin);
        const Mat Z = solve_columns(dict.data(), Yb, cfg, alphas);
        partial[static_cast<std::size_t>(b)] =
            0.5 * (dict.data() * Z - Yb).squaredNorm() + cfg.lambda * Z.lpNorm<1>();
      },
      threads);
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

inline double unrolled_loss(const DenseDictionary& dict, const Mat& Y, const UnrollConfig& cfg,
                            int threads = 0) {
  return unrolled_loss(dict, Y, cfg, resolve_steps(dict, cfg), threads);
}

}  // namespace dense_batch

}  // namespace udl
