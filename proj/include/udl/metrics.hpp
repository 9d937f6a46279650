#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "udl/core.hpp"
#include "udl/linops.hpp"
#include "udl/sparse_coding.hpp"

namespace udl {

/// Atom-correlation matrix; entry (i, j) compares atom i of A with atom j of B.
using CostMatrix = Mat;

/// Exact O(n^3) minimum-cost assignment (shortest augmenting paths with
/// potentials). Returns the column matched to each row.
inline std::vector<Index> hungarian_min_assignment(const Mat& cost) {
  require_shape(cost.rows() == cost.cols(), "hungarian: cost matrix must be square, got " +
                                                shape_str(cost.rows(), cost.cols()));
  const Index n = cost.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<Index> match(static_cast<std::size_t>(n) + 1, 0);
  std::vector<Index> way(static_cast<std::size_t>(n) + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    match[0] = i;
    Index j0 = 0;
    std::vector<double> min_slack(static_cast<std::size_t>(n) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const Index i0 = match[static_cast<std::size_t>(j0)];
      Index j1 = 0;
      double delta = inf;
      for (Index j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < min_slack[static_cast<std::size_t>(j)]) {
          min_slack[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (min_slack[static_cast<std::size_t>(j)] < delta) {
          delta = min_slack[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          min_slack[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> row_to_col(static_cast<std::size_t>(n), 0);
  for (Index j = 1; j <= n; ++j) {
    if (match[static_cast<std::size_t>(j)] > 0) {
      row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
  return row_to_col;
}

namespace detail {

inline Mat unit_columns(Mat m) {
  for (Index j = 0; j < m.cols(); ++j) {
    const double norm = m.col(j).norm();
    if (norm > 0.0) m.col(j) /= norm;
  }
  return m;
}

/// Max over circular shifts of |<a, shift_s(b)>| for unit vectors a, b.
inline double max_circular_correlation(const Vec& a, const Vec& b) {
  const Index t = a.size();
  double best = 0.0;
  for (Index s = 0; s < t; ++s) {
    double dot = 0.0;
    for (Index i = 0; i < t; ++i) dot += a[i] * b[(i + s) % t];
    best = std::max(best, std::abs(dot));
  }
  return best;
}

}  // namespace detail

inline CostMatrix correlation_cost_matrix(const Mat& atoms_a, const Mat& atoms_b) {
  require_shape(atoms_a.rows() == atoms_b.rows() && atoms_a.cols() == atoms_b.cols(),
                "cost matrix: dictionaries " + shape_str(atoms_a.rows(), atoms_a.cols()) +
                    " and " + shape_str(atoms_b.rows(), atoms_b.cols()) + " differ");
  return detail::unit_columns(atoms_a).transpose() * detail::unit_columns(atoms_b);
}

/// Optimal-assignment value of a correlation matrix:
/// S(C) = max over permutations of mean |C_{sigma(i), i}|.
inline double assignment_score(const CostMatrix& c) {
  const auto assignment = hungarian_min_assignment(-c.cwiseAbs());
  double total = 0.0;
  for (Index i = 0; i < c.rows(); ++i) {
    total += std::abs(c(i, assignment[static_cast<std::size_t>(i)]));
  }
  return total / static_cast<double>(c.rows());
}

/// Sign- and permutation-invariant recovery score for dense dictionaries.
inline double recovery_score(const DenseDictionary& a, const DenseDictionary& b) {
  require_shape(a.atom_count() == b.atom_count(),
                "recovery_score: atom counts differ (" + std::to_string(a.atom_count()) + " vs " +
                    std::to_string(b.atom_count()) + ")");
  return assignment_score(correlation_cost_matrix(a.data(), b.data()));
}

/// Convolutional atoms: correlation is maximized over circular shifts before
/// the assignment.
inline double recovery_score(const ConvDictionary& a, const ConvDictionary& b) {
  require_shape(a.atom_count() == b.atom_count(),
                "recovery_score: atom counts differ (" + std::to_string(a.atom_count()) + " vs " +
                    std::to_string(b.atom_count()) + ")");
  const Mat ka = detail::unit_columns(a.kernels().transpose());
  const Mat kb = detail::unit_columns(b.kernels().transpose());
  Mat c(a.atom_count(), a.atom_count());
  for (Index i = 0; i < c.rows(); ++i) {
    for (Index j = 0; j < c.cols(); ++j) {
      c(i, j) = detail::max_circular_correlation(ka.col(i), kb.col(j));
    }
  }
  return assignment_score(c);
}

struct RankOneScore {
  double u_corr = 0.0;  // mean |corr| of spatial maps under the assignment
  double v_corr = 0.0;  // mean shift-max |corr| of temporal patterns
  double mean = 0.0;
  std::vector<Index> assignment;
};

/// Rank-1 atoms are matched once on the averaged (u, v) correlation; the two
/// factor scores are reported separately.
inline RankOneScore recovery_score(const RankOneConvDictionary& a,
                                   const RankOneConvDictionary& b) {
  require_shape(a.atom_count() == b.atom_count(),
                "recovery_score: atom counts differ (" + std::to_string(a.atom_count()) + " vs " +
                    std::to_string(b.atom_count()) + ")");
  const Mat ua = detail::unit_columns(a.u()), ub = detail::unit_columns(b.u());
  const Mat va = detail::unit_columns(a.v()), vb = detail::unit_columns(b.v());
  const Index n = a.atom_count();
  Mat cu = (ua.transpose() * ub).cwiseAbs();
  Mat cv(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      cv(i, j) = detail::max_circular_correlation(va.col(i), vb.col(j));
    }
  }
  RankOneScore score;
  score.assignment = hungarian_min_assignment(-0.5 * (cu + cv));
  for (Index i = 0; i < n; ++i) {
    score.u_corr += cu(i, score.assignment[static_cast<std::size_t>(i)]);
    score.v_corr += cv(i, score.assignment[static_cast<std::size_t>(i)]);
  }
  score.u_corr /= static_cast<double>(n);
  score.v_corr /= static_cast<double>(n);
  score.mean = 0.5 * (score.u_corr + score.v_corr);
  return score;
}

/// Cosine similarity Tr(g^T g*) / (||g|| ||g*||); no angle for a zero input.
template <class DerivedA, class DerivedB>
std::optional<double> cosine_angle(const Eigen::MatrixBase<DerivedA>& g,
                                   const Eigen::MatrixBase<DerivedB>& g_ref) {
  const double ng = g.norm();
  const double nr = g_ref.norm();
  if (ng == 0.0 || nr == 0.0) return std::nullopt;
  return (g.array() * g_ref.array()).sum() / (ng * nr);
}

/// (<g2,g*> - <g1,g*>) / (1 - <g1,g*>); positive means the unrolled estimate
/// points closer to the reference than the analytic one.
template <class D1, class D2, class DR>
std::optional<double> relative_angle_difference(const Eigen::MatrixBase<D1>& g1,
                                                const Eigen::MatrixBase<D2>& g2,
                                                const Eigen::MatrixBase<DR>& g_ref) {
  const auto a1 = cosine_angle(g1, g_ref);
  const auto a2 = cosine_angle(g2, g_ref);
  if (!a1 || !a2) return std::nullopt;
  const double denom = 1.0 - *a1;
  if (std::abs(denom) < 1e-12) return std::nullopt;
  return (*a2 - *a1) / denom;
}

template <class DerivedA, class DerivedB>
double psnr(const Eigen::MatrixBase<DerivedA>& reference, const Eigen::MatrixBase<DerivedB>& estimate,
            double peak) {
  require_shape(reference.rows() == estimate.rows() && reference.cols() == estimate.cols(),
                "psnr: shapes " + shape_str(reference.rows(), reference.cols()) + " and " +
                    shape_str(estimate.rows(), estimate.cols()) + " differ");
  require_shape(peak > 0.0, "psnr: peak must be positive");
  const double mse = (reference - estimate).squaredNorm() / static_cast<double>(reference.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double snr(double signal_variance, double noise_variance) {
  require_shape(signal_variance > 0.0 && noise_variance > 0.0,
                "snr: variances must be positive");
  return 10.0 * std::log10(signal_variance / noise_variance);
}

struct LineScanPoint {
  double t = 0.0;
  double loss = 0.0;
};

/// F_N((1 - t) A + t B) at equispaced t in [0, 1]. Raw interpolation, no
/// projection onto the constraint set.
inline std::vector<LineScanPoint> loss_line_scan(const DenseDictionary& a,
                                                 const DenseDictionary& b, const Mat& data,
                                                 const UnrollConfig& cfg, int n_points,
                                                 int threads = 0) {
  require_shape(a.signal_dim() == b.signal_dim() && a.atom_count() == b.atom_count(),
                "loss_line_scan: dictionaries " + shape_str(a.signal_dim(), a.atom_count()) +
                    " and " + shape_str(b.signal_dim(), b.atom_count()) + " differ");
  require_shape(n_points >= 2, "loss_line_scan: need at least 2 points");
  std::vector<LineScanPoint> curve;
  curve.reserve(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n_points - 1);
    const DenseDictionary interp(((1.0 - t) * a.data() + t * b.data()).eval());
    curve.push_back({t, dense_batch::unrolled_loss(interp, data, cfg, threads)});
  }
  return curve;
}

}  // namespace udl
