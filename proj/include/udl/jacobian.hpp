#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "udl/core.hpp"
#include "udl/linops.hpp"
#include "udl/parallel.hpp"
#include "udl/sparse_coding.hpp"

namespace udl {

/// Weak Jacobians of a code with respect to each dictionary row:
/// block l holds J_l = dz/dD_l, an n x n matrix. Rows of J_l outside the
/// support of the current iterate are exactly zero. Stored as one n x (n*m)
/// matrix so one GEMM advances all blocks.
class JacobianStack {
 public:
  JacobianStack() = default;
  JacobianStack(Index m, Index n, Algorithm algorithm = Algorithm::Ista, int origin_iteration = 0)
      : flat_(Mat::Zero(n, n * m)),
        m_(m),
        n_(n),
        algorithm_(algorithm),
        origin_iteration_(origin_iteration) {}

  Index dict_rows() const { return m_; }
  Index code_dim() const { return n_; }
  Algorithm algorithm() const { return algorithm_; }
  int origin_iteration() const { return origin_iteration_; }

  Eigen::Ref<Mat> block(Index l) { return flat_.middleCols(l * n_, n_); }
  Eigen::Ref<const Mat> block(Index l) const { return flat_.middleCols(l * n_, n_); }
  Mat& flat() { return flat_; }
  const Mat& flat() const { return flat_; }

  bool unstable() const { return unstable_; }
  void mark_unstable() { unstable_ = true; }

  /// Marks the stack unstable if any entry went non-finite.
  bool check_finite() {
    if (!flat_.allFinite()) unstable_ = true;
    return !unstable_;
  }

 private:
  Mat flat_;
  Index m_ = 0;
  Index n_ = 0;
  Algorithm algorithm_ = Algorithm::Ista;
  int origin_iteration_ = 0;
  bool unstable_ = false;
};

namespace detail {

/// One masked affine update of every block, in place:
///   J_l <- 1_{|z_next| > 0} .* (J_l - step (D_l z_prev^T + (D_l^T z_prev - y_l) I + G J_l)).
inline void jacobian_step_inplace(Mat& flat, const Mat& gram, const Mat& dict_data, const Vec& y,
                                  const Vec& z_prev, const Vec& z_next, double step) {
  const Index m = dict_data.rows();
  const Index n = dict_data.cols();
  const Vec residual = dict_data * z_prev - y;  // entry l is D_l^T z_prev - y_l
  flat -= step * (gram * flat).eval();
  for (Index l = 0; l < m; ++l) {
    auto block = flat.middleCols(l * n, n);
    block.noalias() -= step * dict_data.row(l).transpose() * z_prev.transpose();
    block.diagonal().array() -= step * residual[l];
  }
  for (Index i = 0; i < n; ++i) {
    if (z_next[i] == 0.0) flat.row(i).setZero();
  }
}

}  // namespace detail

/// One iteration of the weak-Jacobian induction. z_next is the iterate the
/// support mask is read from; step must be the step that produced z_next.
inline JacobianStack jacobian_step(const JacobianStack& stack, const Vec& z_next,
                                   const Vec& z_prev, const DenseDictionary& dict, const Vec& y,
                                   double step) {
  require_shape(stack.dict_rows() == dict.signal_dim() && stack.code_dim() == dict.atom_count(),
                "jacobian_step: stack built for " +
                    shape_str(stack.dict_rows(), stack.code_dim()) + ", dictionary is " +
                    shape_str(dict.signal_dim(), dict.atom_count()));
  require_shape(z_next.size() == dict.atom_count() && z_prev.size() == dict.atom_count(),
                "jacobian_step: code length does not match atom count " +
                    std::to_string(dict.atom_count()));
  require_shape(y.size() == dict.signal_dim(), "jacobian_step: signal length " +
                                                   std::to_string(y.size()) + " vs dictionary " +
                                                   shape_str(dict.signal_dim(),
                                                             dict.atom_count()));
  JacobianStack next = stack;
  detail::jacobian_step_inplace(next.flat(), dict.gram(), dict.data(), y, z_prev, z_next, step);
  next.check_finite();
  return next;
}

struct PropagationResult {
  Vec code;
  JacobianStack stack;
  IterateTrace<Vec> trace;
};

/// Runs the solver to iteration N-K without Jacobians, then co-propagates the
/// stack from zero over the final K iterations. For FISTA the momentum
/// combination is linear in the iterates, so the x- and z-stacks combine with
/// the same coefficients.
inline PropagationResult propagate_jacobian(const DenseDictionary& dict, const Vec& y,
                                            const UnrollConfig& cfg,
                                            const TraceOptions& want = {}) {
  cfg.validate();
  const Index m = dict.signal_dim();
  const Index n = dict.atom_count();
  const int depth = cfg.effective_depth();
  const int start = cfg.n_iters - depth;

  PropagationResult result;
  result.trace.alphas = detail::resolve_steps(dict, dict.zero_code(), cfg, &result.trace.lipschitz);
  result.stack = JacobianStack(m, n, cfg.algorithm, start);
  const Mat gram = dict.gram();

  Vec z = Vec::Zero(n);
  Vec x = z;
  double t = 1.0;
  Mat jx_prev;  // FISTA: stack for x_{n-1}
  auto record = [&](const Vec& zn, double tn) {
    if (want.costs) result.trace.costs.push_back(lasso_cost(dict, zn, y, cfg.lambda));
    if (want.supports) result.trace.supports.push_back(support(zn, cfg.support_tol));
    if (want.snapshots) result.trace.iterates.push_back(zn);
    if (cfg.algorithm == Algorithm::Fista) result.trace.t_sequence.push_back(tn);
  };
  record(z, t);

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const double alpha = result.trace.alphas[iter];
    const Vec grad = dict.adjoint(dict.apply(z) - y);
    const bool track = iter >= start;
    if (cfg.algorithm == Algorithm::Ista) {
      const Vec z_next = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
      if (track) {
        detail::jacobian_step_inplace(result.stack.flat(), gram, dict.data(), y, z, z_next, alpha);
        result.stack.check_finite();
      }
      z = z_next;
    } else {
      const Vec x_next = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
      const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
      const double momentum = (t - 1.0) / t_next;
      if (track) {
        if (jx_prev.size() == 0) jx_prev = Mat::Zero(n, n * m);
        Mat jx_next = result.stack.flat();  // current z-stack feeds the proximal step
        detail::jacobian_step_inplace(jx_next, gram, dict.data(), y, z, x_next, alpha);
        result.stack.flat() = (1.0 + momentum) * jx_next - momentum * jx_prev;
        jx_prev = std::move(jx_next);
        result.stack.check_finite();
      }
      z = x_next + momentum * (x_next - x);
      x = x_next;
      t = t_next;
    }
    detail::guard_iterate(z, iter + 1, cfg.divergence_norm);
    record(z, t);
  }
  result.code = std::move(z);
  return result;
}

/// Frobenius error between two stacks over all blocks.
inline double stack_error(const JacobianStack& a, const JacobianStack& b) {
  return (a.flat() - b.flat()).norm();
}

/// Spectral error per dictionary row: entry l is ||J_l - J'_l||_2.
inline Vec row_spectral_errors(const JacobianStack& a, const JacobianStack& b) {
  Vec errors(a.dict_rows());
  for (Index l = 0; l < a.dict_rows(); ++l) {
    const Mat diff = a.block(l) - b.block(l);
    Eigen::JacobiSVD<Mat> svd(diff);
    errors[l] = svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
  }
  return errors;
}

struct JacobianCurve {
  std::vector<int> iters;
  std::vector<double> errors;      // stack error vs the fixed point
  int support_identified_at = -1;  // first n with S_k == S* for all recorded k >= n
  bool has_nonfinite = false;
};

/// Solves one instance with snapshots and replays the Jacobian recursion over
/// any span, so curves at several truncation depths reuse one forward solve.
class JacobianReplay {
 public:
  JacobianReplay(const DenseDictionary& dict, const Vec& y, const UnrollConfig& cfg)
      : dict_(dict), y_(y), cfg_(cfg), gram_(dict.gram()) {
    cfg_.validate();
    solved_ = solve(dict_, y_, dict_.zero_code(), cfg_,
                    TraceOptions{.costs = false, .supports = true, .snapshots = true});
  }

  const IterateTrace<Vec>& trace() const { return solved_.trace; }
  const Vec& code() const { return solved_.code; }

  /// First iteration from which every recorded support equals s_star; -1 if
  /// the last iterate still differs.
  int support_identified_iter(const std::vector<Index>& s_star) const {
    const auto& supports = solved_.trace.supports;
    int first = -1;
    for (int n = static_cast<int>(supports.size()) - 1; n >= 0; --n) {
      if (supports[static_cast<std::size_t>(n)] == s_star) first = n;
      else break;
    }
    return first;
  }

  /// Stack at iteration n with back-propagation depth K (kFullDepth: from 0).
  JacobianStack stack_at(int n, int truncation = kFullDepth) const {
    const int from = truncation == kFullDepth ? 0 : std::max(0, n - truncation);
    JacobianStack stack(dict_.signal_dim(), dict_.atom_count(), cfg_.algorithm, from);
    Mat jx_prev;
    propagate_span(stack.flat(), jx_prev, from, n);
    stack.check_finite();
    return stack;
  }

  /// Visits the stack at every grid iteration; for full depth one incremental
  /// pass serves all grid points.
  template <class Visitor>
  void walk(const std::vector<int>& grid, int truncation, Visitor&& visit) const {
    if (truncation == kFullDepth) {
      JacobianStack stack(dict_.signal_dim(), dict_.atom_count(), cfg_.algorithm, 0);
      Mat jx_prev;
      int reached = 0;
      for (int n : grid) {
        propagate_span(stack.flat(), jx_prev, reached, n);
        reached = n;
        stack.check_finite();
        visit(n, stack);
      }
    } else {
      for (int n : grid) {
        visit(n, stack_at(n, truncation));
      }
    }
  }

  JacobianCurve error_curve(const JacobianStack& j_star, const std::vector<Index>& s_star,
                            const std::vector<int>& grid, int truncation = kFullDepth) const {
    JacobianCurve curve;
    curve.support_identified_at = support_identified_iter(s_star);
    walk(grid, truncation,
         [&](int n, const JacobianStack& stack) { push_point(curve, n, stack, j_star); });
    return curve;
  }

 private:
  void push_point(JacobianCurve& curve, int n, const JacobianStack& stack,
                  const JacobianStack& j_star) const {
    curve.iters.push_back(n);
    const double err = stack_error(stack, j_star);
    if (!std::isfinite(err)) curve.has_nonfinite = true;
    curve.errors.push_back(err);
  }

  /// Advances flat over iterations [from, to) using the recorded snapshots.
  void propagate_span(Mat& flat, Mat& jx_prev, int from, int to) const {
    const auto& zs = solved_.trace.iterates;
    const auto& xs = solved_.trace.aux_iterates;
    const auto& ts = solved_.trace.t_sequence;
    for (int n = from; n < to; ++n) {
      const double alpha = solved_.trace.alphas[n];
      if (cfg_.algorithm == Algorithm::Ista) {
        detail::jacobian_step_inplace(flat, gram_, dict_.data(), y_,
                                      zs[static_cast<std::size_t>(n)],
                                      zs[static_cast<std::size_t>(n + 1)], alpha);
      } else {
        // fresh propagations start both stacks at zero; incremental
        // continuations keep the x-stack from the previous span
        if (jx_prev.size() == 0) {
          jx_prev = Mat::Zero(flat.rows(), flat.cols());
        }
        Mat jx_next = flat;
        detail::jacobian_step_inplace(jx_next, gram_, dict_.data(), y_,
                                      zs[static_cast<std::size_t>(n)],
                                      xs[static_cast<std::size_t>(n + 1)], alpha);
        const double momentum = (ts[static_cast<std::size_t>(n)] - 1.0) /
                                ts[static_cast<std::size_t>(n + 1)];
        flat = (1.0 + momentum) * jx_next - momentum * jx_prev;
        jx_prev = std::move(jx_next);
      }
    }
  }

  DenseDictionary dict_;
  Vec y_;
  UnrollConfig cfg_;
  Mat gram_;
  SolveResult<DenseDictionary> solved_;
};

struct StabilityReport {
  std::vector<char> unstable;
  double fraction = 0.0;
};

/// A curve is unstable when it exceeds its initial value by more than
/// `factor` at any recorded iteration after support identification (all
/// iterations when the support is never identified), or goes non-finite.
inline StabilityReport classify_stability(const std::vector<JacobianCurve>& curves,
                                          double factor = 10.0) {
  StabilityReport report;
  report.unstable.reserve(curves.size());
  int count = 0;
  for (const auto& curve : curves) {
    bool bad = curve.has_nonfinite;
    if (!bad && !curve.errors.empty()) {
      const double initial = curve.errors.front();
      for (std::size_t i = 0; i < curve.errors.size(); ++i) {
        if (curve.support_identified_at >= 0 &&
            curve.iters[i] < curve.support_identified_at) {
          continue;
        }
        if (curve.errors[i] > factor * initial) {
          bad = true;
          break;
        }
      }
    }
    report.unstable.push_back(bad ? 1 : 0);
    count += bad ? 1 : 0;
  }
  report.fraction = curves.empty() ? 0.0 : static_cast<double>(count) /
                                               static_cast<double>(curves.size());
  return report;
}

/// Fixed point of the induction: on the support S* of z*,
///   J*_{l,S*} = -(D_S^T D_S)^{-1} (D_l z*^T + (D_l^T z* - y_l) I)_{S*},
/// zero elsewhere.
inline JacobianStack jacobian_fixed_point(const DenseDictionary& dict, const Vec& z_star,
                                          const Vec& y, double cond_limit = 1e10) {
  const Index m = dict.signal_dim();
  const Index n = dict.atom_count();
  JacobianStack stack(m, n);
  const std::vector<Index> s = support(z_star, 0.0);
  if (s.empty()) return stack;

  const Index k = static_cast<Index>(s.size());
  Mat d_s(m, k);
  for (Index j = 0; j < k; ++j) d_s.col(j) = dict.data().col(s[static_cast<std::size_t>(j)]);
  const Mat gram_s = d_s.transpose() * d_s;
  Eigen::SelfAdjointEigenSolver<Mat> eig(gram_s);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (lo <= 0.0 || hi / lo > cond_limit) {
    throw SingularGramError(lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity(),
                            "support Gram matrix is numerically singular (|S*| = " +
                                std::to_string(k) + ")");
  }
  Eigen::LDLT<Mat> solver(gram_s);
  const Vec residual = dict.data() * z_star - y;
  for (Index l = 0; l < m; ++l) {
    // U restricted to S* rows and columns; off-support columns vanish since
    // z*_k = 0 there and the diagonal term needs i == k.
    Mat u_s(k, k);
    for (Index a = 0; a < k; ++a) {
      for (Index b = 0; b < k; ++b) {
        u_s(a, b) = dict.data()(l, s[static_cast<std::size_t>(a)]) *
                    z_star[s[static_cast<std::size_t>(b)]];
      }
      u_s(a, a) += residual[l];
    }
    const Mat x = -solver.solve(u_s);
    auto block = stack.block(l);
    for (Index a = 0; a < k; ++a) {
      for (Index b = 0; b < k; ++b) {
        block(s[static_cast<std::size_t>(a)], s[static_cast<std::size_t>(b)]) = x(a, b);
      }
    }
  }
  return stack;
}

struct ResidualReport {
  double norm = 0.0;                 // operator norm of R(J, S-tilde)
  std::vector<Index> support_n;      // S_N
  std::vector<Index> support_star;   // S*
  std::vector<Index> spurious;       // E-bar = S_N \ S*
  double b_n = 0.0;                  // ||P_E - D_E^T D_S^{dagger T} P_S||
};

/// Assembles R(J, S-tilde) with S-tilde = S_N union S* and reports its
/// operator norm, treating R as the map w -> (row l: J_l^T (G w)_masked +
/// (U_l w)_masked). The fixed-point pair (J*, S*) drives the norm to zero.
inline ResidualReport residual_R(const JacobianStack& stack, const std::vector<Index>& support_n,
                                 const DenseDictionary& dict, const Vec& z_star, const Vec& y) {
  const Index m = dict.signal_dim();
  const Index n = dict.atom_count();
  ResidualReport report;
  report.support_n = support_n;
  report.support_star = support(z_star, 0.0);

  std::vector<bool> in_star(static_cast<std::size_t>(n), false);
  for (Index i : report.support_star) in_star[static_cast<std::size_t>(i)] = true;
  std::vector<bool> in_union = in_star;
  for (Index i : support_n) {
    if (!in_union[static_cast<std::size_t>(i)]) in_union[static_cast<std::size_t>(i)] = true;
    if (!in_star[static_cast<std::size_t>(i)]) report.spurious.push_back(i);
  }

  const Mat gram = dict.gram();
  const Vec residual = dict.data() * z_star - y;
  Mat accum = Mat::Zero(n, n);  // sum_l R_l^T R_l
  for (Index l = 0; l < m; ++l) {
    Mat r_l = gram * stack.block(l);
    r_l.noalias() += dict.data().row(l).transpose() * z_star.transpose();
    r_l.diagonal().array() += residual[l];
    for (Index i = 0; i < n; ++i) {
      if (!in_union[static_cast<std::size_t>(i)]) r_l.row(i).setZero();
    }
    accum.noalias() += r_l.transpose() * r_l;
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(accum);
  report.norm = std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));

  if (!report.spurious.empty()) {
    const Index ke = static_cast<Index>(report.spurious.size());
    Mat op = Mat::Zero(ke, n);
    for (Index a = 0; a < ke; ++a) op(a, report.spurious[static_cast<std::size_t>(a)]) = 1.0;
    if (!report.support_star.empty()) {
      const Index ks = static_cast<Index>(report.support_star.size());
      Mat d_s(m, ks), d_e(m, ke);
      for (Index j = 0; j < ks; ++j) {
        d_s.col(j) = dict.data().col(report.support_star[static_cast<std::size_t>(j)]);
      }
      for (Index j = 0; j < ke; ++j) {
        d_e.col(j) = dict.data().col(report.spurious[static_cast<std::size_t>(j)]);
      }
      // D_S^{dagger T} = D_S (D_S^T D_S)^{-1}
      const Mat pinv_t = d_s * (d_s.transpose() * d_s).ldlt().solve(Mat::Identity(ks, ks));
      const Mat coupling = d_e.transpose() * pinv_t;  // ke x ks
      for (Index j = 0; j < ks; ++j) {
        op.col(report.support_star[static_cast<std::size_t>(j)]) -= coupling.col(j);
      }
    }
    Eigen::JacobiSVD<Mat> svd(op);
    report.b_n = svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
  }
  return report;
}

enum class GradientKind { Reference, Analytic, Unrolled };

struct GradientEstimate {
  Mat value;  // m x n
  GradientKind kind = GradientKind::Analytic;
  int iterations = 0;
  int truncation = kFullDepth;
  bool unstable = false;
};

/// Reference solution of one Lasso instance from a long FISTA run.
struct Reference {
  Vec z_star;
  std::vector<Index> support_star;
  double f_star = 0.0;
  Mat g_star;  // (D z* - y) z*^T
};

inline Reference compute_reference(const DenseDictionary& dict, const Vec& y, double lambda,
                                   int ref_iters = 10000) {
  UnrollConfig cfg;
  cfg.n_iters = ref_iters;
  cfg.algorithm = Algorithm::Fista;
  cfg.lambda = lambda;
  auto solved = fista(dict, y, dict.zero_code(), cfg, TraceOptions{.costs = false});
  Reference ref;
  ref.z_star = std::move(solved.code);
  ref.support_star = support(ref.z_star, 0.0);
  ref.f_star = lasso_cost(dict, ref.z_star, y, lambda);
  ref.g_star = (dict.apply(ref.z_star) - y) * ref.z_star.transpose();
  return ref;
}

/// g* = grad_2 F(z*(D), D), the Danskin gradient, with z* from ref_iters of
/// FISTA.
inline GradientEstimate grad_reference(const DenseDictionary& dict, const Vec& y, double lambda,
                                       int ref_iters = 10000) {
  Reference ref = compute_reference(dict, y, lambda, ref_iters);
  return {std::move(ref.g_star), GradientKind::Reference, ref_iters, kFullDepth, false};
}

/// g^1_N = grad_2 F(z_N(D), D): the alternating-minimization estimate.
inline GradientEstimate grad_am(const DenseDictionary& dict, const Vec& y,
                                const UnrollConfig& cfg) {
  auto solved = solve(dict, y, cfg, TraceOptions{.costs = false});
  return {(dict.apply(solved.code) - y) * solved.code.transpose(), GradientKind::Analytic,
          cfg.n_iters, kFullDepth, false};
}

struct UnrolledGradient {
  GradientEstimate estimate;
  Vec code;
  JacobianStack stack;
  std::optional<ResidualReport> residual;
};

/// g^2_N = grad_2 F(z_N, D) + J^+ (grad_1 f(z_N, D) + lambda sign(z_N)),
/// with the stack from forward co-propagation. When a reference solution is
/// supplied the residual report R(J_N, S_N union S*) is attached.
inline UnrolledGradient grad_unrolled(const DenseDictionary& dict, const Vec& y,
                                      const UnrollConfig& cfg, const Reference* ref = nullptr) {
  UnrolledGradient out;
  PropagationResult prop = propagate_jacobian(dict, y, cfg);
  const Index m = dict.signal_dim();
  const Index n = dict.atom_count();
  const Vec residual = dict.apply(prop.code) - y;
  const Vec subgrad =
      dict.adjoint(residual) + cfg.lambda * prop.code.array().sign().matrix();

  Mat g = residual * prop.code.transpose();
  const Eigen::RowVectorXd contraction = subgrad.transpose() * prop.stack.flat();
  for (Index l = 0; l < m; ++l) g.row(l) += contraction.segment(l * n, n);

  out.estimate = {std::move(g), GradientKind::Unrolled, cfg.n_iters, cfg.truncation_depth,
                  prop.stack.unstable()};
  if (ref) {
    out.residual =
        residual_R(prop.stack, support(prop.code, cfg.support_tol), dict, ref->z_star, y);
  }
  out.code = std::move(prop.code);
  out.stack = std::move(prop.stack);
  return out;
}

// ---------------------------------------------------------------------------
// Reverse contraction of the same masked affine recursion. Training only
// needs J^+ v, never the full stack, and the contraction costs O(K (n^2+mn))
// per sample instead of O(K m n^3). Agreement with the forward stack is
// covered by tests; the forward path stays the diagnostics implementation.
// ---------------------------------------------------------------------------

template <DictionaryOperator D>
struct ParamGradResult {
  typename D::ParamGrad grad;
  Vec alpha_grad;  // dF/d(alpha_k); zero outside the truncation window
  typename D::Code code;
  double cost = 0.0;
  bool unstable = false;
};

/// Full g^2 with respect to the dictionary parameters (and optionally the
/// per-layer steps) for a single sample, via one forward solve and one
/// backward sweep over the last K iterations.
template <DictionaryOperator D>
ParamGradResult<D> unrolled_param_gradient(const D& dict, const typename D::Signal& y,
                                           const typename D::Code& code_like,
                                           const UnrollConfig& cfg, bool want_alpha_grad = false) {
  using Code = typename D::Code;
  cfg.validate();
  const int depth = cfg.effective_depth();
  const int start = cfg.n_iters - depth;
  const bool momentum = cfg.algorithm == Algorithm::Fista;

  Vec alphas = detail::resolve_steps(dict, code_like, cfg, nullptr);
  std::vector<Code> z_hist;  // z_{start} .. z_N
  std::vector<Code> x_hist;  // thresholded iterates x_{start+1} .. x_N
  std::vector<double> t_seq(1, 1.0);
  z_hist.reserve(static_cast<std::size_t>(depth) + 1);
  x_hist.reserve(static_cast<std::size_t>(depth));

  Code z = code_like;
  z.setZero();
  Code x = z;
  double t = 1.0;
  if (start == 0) z_hist.push_back(z);
  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const double alpha = alphas[iter];
    const Code grad = dict.adjoint(dict.apply(z) - y);
    Code x_next = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
    if (momentum) {
      const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
      const Code z_next = x_next + ((t - 1.0) / t_next) * (x_next - x);
      x = x_next;
      t = t_next;
      z = z_next;
    } else {
      z = x_next;
    }
    t_seq.push_back(t);
    detail::guard_iterate(z, iter + 1, cfg.divergence_norm);
    if (iter + 1 > start) {
      x_hist.push_back(std::move(x_next));
      z_hist.push_back(z);
    } else if (iter + 1 == start) {
      z_hist.push_back(z);
    }
  }

  ParamGradResult<D> out;
  out.code = z;
  out.cost = lasso_cost(dict, z, y, cfg.lambda);
  out.grad = dict.zero_param_grad();
  out.alpha_grad = Vec::Zero(cfg.n_iters);

  // Direct term: grad_2 F(z_N, D).
  const typename D::Signal r_final = dict.apply(z) - y;
  dict.add_bilinear_grad(1.0, z, r_final, out.grad);

  // Adjoint seed: grad_1 f(z_N, D) + lambda sign(z_N).
  Code az = dict.adjoint(r_final) + (cfg.lambda * z.array().sign()).matrix();
  Code az_next;  // adjoint of z_{k+1}, for the FISTA momentum carry

  for (int k = cfg.n_iters; k > start; --k) {
    const std::size_t zi = static_cast<std::size_t>(k - start);
    const Code& x_k = x_hist[zi - 1];
    const Code& z_prev = z_hist[zi - 1];
    const double alpha = alphas[k - 1];

    Code ax = az;
    if (momentum) {
      const double c_prev = (t_seq[static_cast<std::size_t>(k - 1)] - 1.0) /
                            t_seq[static_cast<std::size_t>(k)];
      ax = (1.0 + c_prev) * az;
      if (k < cfg.n_iters) {
        const double c_k =
            (t_seq[static_cast<std::size_t>(k)] - 1.0) / t_seq[static_cast<std::size_t>(k + 1)];
        ax -= c_k * az_next;
      }
    }
    Code q = (x_k.array() != 0.0).template cast<double>().matrix().cwiseProduct(ax);

    const typename D::Signal r_prev = dict.apply(z_prev) - y;
    dict.add_bilinear_grad(-alpha, q, r_prev, out.grad);
    dict.add_bilinear_grad(-alpha, z_prev, dict.apply(q), out.grad);
    if (want_alpha_grad) {
      const Code inner_grad = dict.adjoint(r_prev);
      out.alpha_grad[k - 1] =
          -((q.array() * (inner_grad.array() + cfg.lambda * x_k.array().sign())).sum());
    }

    az_next = az;
    az = q - alpha * dict.adjoint(dict.apply(q));
  }
  return out;
}

/// dF(z_N(D, alpha), D)/d(alpha_p) for every layer p, by co-propagating one
/// tangent code per layer forward with the masked affine recursion. The layer
/// threshold lambda * alpha_p contributes -lambda sign(x_p) to its own
/// tangent seed.
template <DictionaryOperator D>
Vec step_size_gradient(const D& dict, const typename D::Signal& y,
                       const typename D::Code& code_like, const UnrollConfig& cfg) {
  using Code = typename D::Code;
  cfg.validate();
  const bool momentum = cfg.algorithm == Algorithm::Fista;
  const Vec alphas = detail::resolve_steps(dict, code_like, cfg, nullptr);
  const int n_layers = cfg.n_iters;

  Code zero = code_like;
  zero.setZero();
  std::vector<Code> tangents(static_cast<std::size_t>(n_layers), zero);  // d z / d alpha_p
  std::vector<Code> tangents_x_prev(momentum ? static_cast<std::size_t>(n_layers) : 0, zero);

  Code z = zero;
  Code x = zero;
  double t = 1.0;
  for (int k = 1; k <= n_layers; ++k) {
    const double alpha = alphas[k - 1];
    const Code grad = dict.adjoint(dict.apply(z) - y);
    const Code x_next = soft_threshold(z - alpha * grad, cfg.lambda * alpha);
    const auto mask = (x_next.array() != 0.0).template cast<double>();
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    const double c = momentum ? (t - 1.0) / t_next : 0.0;

    for (int p = 1; p <= k; ++p) {
      Code tx_next;
      if (p < k) {
        const Code& tz = tangents[static_cast<std::size_t>(p - 1)];
        tx_next = (mask * (tz - alpha * dict.adjoint(dict.apply(tz))).array()).matrix();
      } else {
        tx_next = (mask * (-grad.array() - cfg.lambda * x_next.array().sign())).matrix();
      }
      if (momentum) {
        Code& tx_prev = tangents_x_prev[static_cast<std::size_t>(p - 1)];
        tangents[static_cast<std::size_t>(p - 1)] = (1.0 + c) * tx_next - c * tx_prev;
        tx_prev = std::move(tx_next);
      } else {
        tangents[static_cast<std::size_t>(p - 1)] = std::move(tx_next);
      }
    }

    if (momentum) {
      z = x_next + c * (x_next - x);
      x = x_next;
      t = t_next;
    } else {
      z = x_next;
    }
    detail::guard_iterate(z, k, cfg.divergence_norm);
  }

  const Code v =
      dict.adjoint(dict.apply(z) - y) + (cfg.lambda * z.array().sign()).matrix();
  Vec out = Vec::Zero(n_layers);
  for (int p = 0; p < n_layers; ++p) {
    out[p] = (v.array() * tangents[static_cast<std::size_t>(p)].array()).sum();
  }
  return out;
}

}  // namespace udl
