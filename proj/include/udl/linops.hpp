#pragma once

#include <cmath>
#include <concepts>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "udl/core.hpp"
#include "udl/rng.hpp"

namespace udl {

struct LipschitzEstimate {
  double value = 0.0;
  int iterations_used = 0;
  double relative_change_at_stop = 0.0;
  bool zero_operator = false;
};

struct ProjectionEvents {
  std::vector<Index> replaced_atoms;
};

namespace conv {

// Valid-correlation boundary convention throughout: a signal of length Ts
// pairs with activations of length Ts - t + 1 for kernels of length t.

inline Vec conv_full_direct(const Vec& x, const Vec& k) {
  const Index out_len = x.size() + k.size() - 1;
  Vec out = Vec::Zero(out_len);
  for (Index j = 0; j < x.size(); ++j) {
    out.segment(j, k.size()) += x[j] * k;
  }
  return out;
}

inline Vec corr_valid_direct(const Vec& x, const Vec& k) {
  const Index out_len = x.size() - k.size() + 1;
  require_shape(out_len >= 1, "corr_valid: signal length " + std::to_string(x.size()) +
                                  " shorter than kernel length " + std::to_string(k.size()));
  Vec out(out_len);
  for (Index j = 0; j < out_len; ++j) {
    out[j] = x.segment(j, k.size()).dot(k);
  }
  return out;
}

inline Index next_pow2(Index n) {
  Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline Vec conv_full_fft(const Vec& x, const Vec& k) {
  const Index out_len = x.size() + k.size() - 1;
  const Index nfft = next_pow2(out_len);
  Eigen::FFT<double> fft;
  std::vector<double> xa(static_cast<std::size_t>(nfft), 0.0);
  std::vector<double> ka(static_cast<std::size_t>(nfft), 0.0);
  for (Index i = 0; i < x.size(); ++i) xa[static_cast<std::size_t>(i)] = x[i];
  for (Index i = 0; i < k.size(); ++i) ka[static_cast<std::size_t>(i)] = k[i];
  std::vector<std::complex<double>> xf, kf;
  fft.fwd(xf, xa);
  fft.fwd(kf, ka);
  for (std::size_t i = 0; i < xf.size(); ++i) xf[i] *= kf[i];
  std::vector<double> full;
  fft.inv(full, xf);
  Vec out(out_len);
  for (Index i = 0; i < out_len; ++i) out[i] = full[static_cast<std::size_t>(i)];
  return out;
}

constexpr Index kFftThreshold = 32;

inline Vec conv_full(const Vec& x, const Vec& k) {
  if (k.size() > kFftThreshold && x.size() > kFftThreshold) return conv_full_fft(x, k);
  return conv_full_direct(x, k);
}

inline Vec corr_valid(const Vec& x, const Vec& k) {
  if (k.size() > kFftThreshold && x.size() > kFftThreshold) {
    Vec full = conv_full_fft(x, k.reverse());
    return full.segment(k.size() - 1, x.size() - k.size() + 1);
  }
  return corr_valid_direct(x, k);
}

}  // namespace conv

namespace detail {

// Replaces an all-zero atom with a deterministic fresh unit vector.
inline Vec fresh_unit_atom(Index dim, Index atom, std::uint64_t salt) {
  CounterRng rng = CounterRng(0x705F9A11DULL + salt).stream(static_cast<std::uint64_t>(atom));
  Vec a(dim);
  for (Index i = 0; i < dim; ++i) a[i] = rng.next_gaussian();
  return a / a.norm();
}

// Columns already at unit norm (within 1e-12) are left bit-identical so that
// projection is idempotent.
inline void normalize_columns(Mat& m, ProjectionEvents* events, std::uint64_t salt) {
  for (Index j = 0; j < m.cols(); ++j) {
    const double norm = m.col(j).norm();
    if (norm == 0.0) {
      m.col(j) = fresh_unit_atom(m.rows(), j, salt);
      if (events) events->replaced_atoms.push_back(j);
    } else if (std::abs(norm - 1.0) > 1e-12) {
      m.col(j) /= norm;
    }
  }
}

}  // namespace detail

/// Dense dictionary D (signal dim m x atom count n); one sample's code is a
/// length-n vector.
class DenseDictionary {
 public:
  using Code = Vec;
  using Signal = Vec;
  using ParamGrad = Mat;

  DenseDictionary() = default;
  explicit DenseDictionary(Mat data) : data_(std::move(data)) {
    require_shape(data_.allFinite(), "DenseDictionary: non-finite entries");
  }

  Index signal_dim() const { return data_.rows(); }
  Index atom_count() const { return data_.cols(); }
  const Mat& data() const { return data_; }

  Signal apply(const Code& code) const {
    require_shape(code.size() == data_.cols(),
                  "apply: code length " + std::to_string(code.size()) +
                      " does not match dictionary " + shape_str(data_.rows(), data_.cols()));
    return data_ * code;
  }

  Code adjoint(const Signal& residual) const {
    require_shape(residual.size() == data_.rows(),
                  "adjoint: signal length " + std::to_string(residual.size()) +
                      " does not match dictionary " + shape_str(data_.rows(), data_.cols()));
    return data_.transpose() * residual;
  }

  Mat apply_batch(const Mat& codes) const {
    require_shape(codes.rows() == data_.cols(),
                  "apply: codes " + shape_str(codes.rows(), codes.cols()) +
                      " do not match dictionary " + shape_str(data_.rows(), data_.cols()));
    return data_ * codes;
  }

  Mat adjoint_batch(const Mat& residuals) const {
    require_shape(residuals.rows() == data_.rows(),
                  "adjoint: signals " + shape_str(residuals.rows(), residuals.cols()) +
                      " do not match dictionary " + shape_str(data_.rows(), data_.cols()));
    return data_.transpose() * residuals;
  }

  Mat gram() const { return data_.transpose() * data_; }

  Code zero_code() const { return Vec::Zero(data_.cols()); }

  ParamGrad zero_param_grad() const { return Mat::Zero(data_.rows(), data_.cols()); }

  /// grad += alpha * d/dD <D c, s>, i.e. alpha * s c^T.
  void add_bilinear_grad(double alpha, const Code& code, const Signal& signal,
                         ParamGrad& grad) const {
    grad.noalias() += alpha * signal * code.transpose();
  }

  DenseDictionary retract(const ParamGrad& grad, double step) const {
    return DenseDictionary(data_ - step * grad);
  }

 private:
  Mat data_;
};

/// Convolutional dictionary with n kernels of shape kh x kw; kh == 1 is the
/// 1-D case where a sample is a single series. Kernels are stored one per
/// row, patch entries in row-major order.
class ConvDictionary {
 public:
  using Code = Mat;    // n x La activations (1-D interface)
  using Signal = Vec;  // length La + kw - 1
  using ParamGrad = Mat;

  ConvDictionary() = default;
  ConvDictionary(Mat kernels, Index kh, Index kw)
      : kernels_(std::move(kernels)), kh_(kh), kw_(kw) {
    require_shape(kernels_.cols() == kh_ * kw_,
                  "ConvDictionary: kernel storage " + shape_str(kernels_.rows(), kernels_.cols()) +
                      " does not match kernel shape " + shape_str(kh_, kw_));
  }

  Index atom_count() const { return kernels_.rows(); }
  Index kernel_rows() const { return kh_; }
  Index kernel_cols() const { return kw_; }
  const Mat& kernels() const { return kernels_; }
  Vec kernel(Index k) const { return kernels_.row(k).transpose(); }

  Signal apply(const Code& code) const {
    require_1d("apply");
    require_shape(code.rows() == kernels_.rows(),
                  "apply: activations " + shape_str(code.rows(), code.cols()) +
                      " do not match atom count " + std::to_string(kernels_.rows()));
    Vec signal = Vec::Zero(code.cols() + kw_ - 1);
    for (Index k = 0; k < kernels_.rows(); ++k) {
      signal += conv::conv_full(code.row(k).transpose(), kernel(k));
    }
    return signal;
  }

  Code adjoint(const Signal& residual) const {
    require_1d("adjoint");
    const Index la = residual.size() - kw_ + 1;
    require_shape(la >= 1, "adjoint: signal length " + std::to_string(residual.size()) +
                               " shorter than kernel length " + std::to_string(kw_));
    Mat code(kernels_.rows(), la);
    for (Index k = 0; k < kernels_.rows(); ++k) {
      code.row(k) = conv::corr_valid(residual, kernel(k)).transpose();
    }
    return code;
  }

  // 2-D interface: per-atom activation maps against an image.
  Mat apply2d(const std::vector<Mat>& codes) const {
    require_shape(static_cast<Index>(codes.size()) == kernels_.rows(),
                  "apply2d: got " + std::to_string(codes.size()) + " activation maps for " +
                      std::to_string(kernels_.rows()) + " atoms");
    const Index ha = codes.front().rows(), wa = codes.front().cols();
    Mat image = Mat::Zero(ha + kh_ - 1, wa + kw_ - 1);
    for (Index k = 0; k < kernels_.rows(); ++k) {
      require_shape(codes[static_cast<std::size_t>(k)].rows() == ha &&
                        codes[static_cast<std::size_t>(k)].cols() == wa,
                    "apply2d: inconsistent activation shapes");
      const Mat& z = codes[static_cast<std::size_t>(k)];
      for (Index r = 0; r < ha; ++r) {
        for (Index c = 0; c < wa; ++c) {
          if (z(r, c) == 0.0) continue;
          image.block(r, c, kh_, kw_) += z(r, c) * patch(k);
        }
      }
    }
    return image;
  }

  std::vector<Mat> adjoint2d(const Mat& image) const {
    const Index ha = image.rows() - kh_ + 1, wa = image.cols() - kw_ + 1;
    require_shape(ha >= 1 && wa >= 1, "adjoint2d: image " + shape_str(image.rows(), image.cols()) +
                                          " smaller than kernel " + shape_str(kh_, kw_));
    std::vector<Mat> codes;
    codes.reserve(static_cast<std::size_t>(kernels_.rows()));
    for (Index k = 0; k < kernels_.rows(); ++k) {
      Mat z(ha, wa);
      const Mat kp = patch(k);
      for (Index r = 0; r < ha; ++r) {
        for (Index c = 0; c < wa; ++c) {
          z(r, c) = (image.block(r, c, kh_, kw_).array() * kp.array()).sum();
        }
      }
      codes.push_back(std::move(z));
    }
    return codes;
  }

  Mat patch(Index k) const {
    Mat p(kh_, kw_);
    for (Index r = 0; r < kh_; ++r) {
      for (Index c = 0; c < kw_; ++c) p(r, c) = kernels_(k, r * kw_ + c);
    }
    return p;
  }

  Code zero_code_for(Index la) const { return Mat::Zero(kernels_.rows(), la); }

  ParamGrad zero_param_grad() const { return Mat::Zero(kernels_.rows(), kernels_.cols()); }

  /// grad_k += alpha * d/dk <A c, s> = alpha * corr_valid(s, c_k) (1-D).
  void add_bilinear_grad(double alpha, const Code& code, const Signal& signal,
                         ParamGrad& grad) const {
    require_1d("add_bilinear_grad");
    for (Index k = 0; k < kernels_.rows(); ++k) {
      grad.row(k) += alpha * conv::corr_valid(signal, code.row(k).transpose()).transpose();
    }
  }

  ConvDictionary retract(const ParamGrad& grad, double step) const {
    return ConvDictionary(kernels_ - step * grad, kh_, kw_);
  }

 private:
  void require_1d(const char* op) const {
    require_shape(kh_ == 1, std::string(op) + ": series interface requires 1-D kernels, have " +
                                shape_str(kh_, kw_));
  }

  Mat kernels_;
  Index kh_ = 1;
  Index kw_ = 0;
};

/// Rank-1 multivariate convolutional dictionary: atom k couples a spatial
/// map u_k (S channels, unit norm) with a temporal pattern v_k (t steps,
/// unit ball). A sample is an S x Ts multichannel series.
class RankOneConvDictionary {
 public:
  using Code = Mat;    // n x La
  using Signal = Mat;  // S x (La + t - 1)
  struct ParamGrad {
    Mat u;  // S x n
    Mat v;  // t x n
  };

  RankOneConvDictionary() = default;
  RankOneConvDictionary(Mat u, Mat v) : u_(std::move(u)), v_(std::move(v)) {
    require_shape(u_.cols() == v_.cols(), "RankOneConvDictionary: u has " +
                                              std::to_string(u_.cols()) + " atoms, v has " +
                                              std::to_string(v_.cols()));
  }

  Index channel_count() const { return u_.rows(); }
  Index kernel_length() const { return v_.rows(); }
  Index atom_count() const { return u_.cols(); }
  const Mat& u() const { return u_; }
  const Mat& v() const { return v_; }

  /// The implied S x t atom u_k v_k^T (rank <= 1 by construction).
  Mat atom(Index k) const { return u_.col(k) * v_.col(k).transpose(); }

  Signal apply(const Code& code) const {
    require_shape(code.rows() == u_.cols(),
                  "apply: activations " + shape_str(code.rows(), code.cols()) +
                      " do not match atom count " + std::to_string(u_.cols()));
    Mat signal = Mat::Zero(u_.rows(), code.cols() + v_.rows() - 1);
    for (Index k = 0; k < u_.cols(); ++k) {
      const Vec temporal = conv::conv_full(code.row(k).transpose(), v_.col(k));
      signal.noalias() += u_.col(k) * temporal.transpose();
    }
    return signal;
  }

  Code adjoint(const Signal& residual) const {
    require_shape(residual.rows() == u_.rows(),
                  "adjoint: signal " + shape_str(residual.rows(), residual.cols()) +
                      " does not match channel count " + std::to_string(u_.rows()));
    const Index la = residual.cols() - v_.rows() + 1;
    require_shape(la >= 1, "adjoint: series length " + std::to_string(residual.cols()) +
                               " shorter than kernel length " + std::to_string(v_.rows()));
    Mat code(u_.cols(), la);
    for (Index k = 0; k < u_.cols(); ++k) {
      const Vec channel = residual.transpose() * u_.col(k);
      code.row(k) = conv::corr_valid(channel, v_.col(k)).transpose();
    }
    return code;
  }

  Code zero_code_for(Index la) const { return Mat::Zero(u_.cols(), la); }

  ParamGrad zero_param_grad() const {
    return {Mat::Zero(u_.rows(), u_.cols()), Mat::Zero(v_.rows(), v_.cols())};
  }

  /// grad += alpha * d/d(u,v) <A_{u,v} c, s>, holding c and s fixed.
  void add_bilinear_grad(double alpha, const Code& code, const Signal& signal,
                         ParamGrad& grad) const {
    for (Index k = 0; k < u_.cols(); ++k) {
      const Vec temporal = conv::conv_full(code.row(k).transpose(), v_.col(k));
      grad.u.col(k).noalias() += alpha * signal * temporal;
      const Vec channel = signal.transpose() * u_.col(k);
      grad.v.col(k) += alpha * conv::corr_valid(channel, code.row(k).transpose());
    }
  }

  RankOneConvDictionary retract(const ParamGrad& grad, double step) const {
    return RankOneConvDictionary(u_ - step * grad.u, v_ - step * grad.v);
  }

 private:
  Mat u_;
  Mat v_;
};

template <class D>
concept DictionaryOperator = requires(const D d, const typename D::Code& c,
                                      const typename D::Signal& s, typename D::ParamGrad& g) {
  { d.apply(c) } -> std::convertible_to<typename D::Signal>;
  { d.adjoint(s) } -> std::convertible_to<typename D::Code>;
  { d.zero_param_grad() } -> std::convertible_to<typename D::ParamGrad>;
  d.add_bilinear_grad(0.0, c, s, g);
};

/// Power iteration on z -> D^T(D z); the returned value is inflated by
/// (1 + tol) so that 1/value is a safe proximal step size. code_like fixes
/// the iterate shape (dictionaries whose code shape depends on the sample
/// geometry pass a representative code).
template <class D>
LipschitzEstimate lipschitz(const D& dict, const typename D::Code& code_like, double tol = 1e-6,
                            int max_iters = 100) {
  using Code = typename D::Code;
  require_shape(tol > 0.0, "lipschitz: tol must be positive");
  CounterRng rng(0x11D5C0DEULL);
  Code x = code_like;
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.next_gaussian();
  x /= x.norm();

  LipschitzEstimate est;
  double value = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    Code w = dict.adjoint(dict.apply(x));
    const double rayleigh = (x.array() * w.array()).sum();
    const double w_norm = w.norm();
    est.iterations_used = it;
    if (w_norm == 0.0) {
      est.zero_operator = true;
      est.value = 0.0;
      return est;
    }
    est.relative_change_at_stop =
        value == 0.0 ? 1.0 : std::abs(rayleigh - value) / std::abs(value);
    value = rayleigh;
    x = w / w_norm;
    if (it > 1 && est.relative_change_at_stop < tol) break;
  }
  est.value = value * (1.0 + tol);
  return est;
}

inline LipschitzEstimate lipschitz(const DenseDictionary& dict, double tol = 1e-6,
                                   int max_iters = 100) {
  return lipschitz(dict, dict.zero_code(), tol, max_iters);
}

inline DenseDictionary project_unit_norm(const DenseDictionary& dict,
                                         ProjectionEvents* events = nullptr,
                                         std::uint64_t salt = 0) {
  Mat data = dict.data();
  detail::normalize_columns(data, events, salt);
  return DenseDictionary(std::move(data));
}

inline ConvDictionary project_unit_norm(const ConvDictionary& dict,
                                        ProjectionEvents* events = nullptr,
                                        std::uint64_t salt = 0) {
  // Unit Frobenius norm per kernel; kernels live in rows.
  Mat kernels = dict.kernels().transpose();
  detail::normalize_columns(kernels, events, salt);
  return ConvDictionary(kernels.transpose(), dict.kernel_rows(), dict.kernel_cols());
}

/// Rank-1 normalization: u_k gets unit norm, v_k absorbs |u_k| and is then
/// clipped to the unit ball. This fixes the scale split of the factorization.
inline RankOneConvDictionary project_unit_norm(const RankOneConvDictionary& dict,
                                               ProjectionEvents* events = nullptr,
                                               std::uint64_t salt = 0) {
  Mat u = dict.u();
  Mat v = dict.v();
  for (Index k = 0; k < u.cols(); ++k) {
    const double nu = u.col(k).norm();
    if (nu == 0.0) {
      u.col(k) = detail::fresh_unit_atom(u.rows(), k, salt);
      if (events) events->replaced_atoms.push_back(k);
    } else if (std::abs(nu - 1.0) > 1e-12) {
      u.col(k) /= nu;
      v.col(k) *= nu;
    }
    const double nv = v.col(k).norm();
    if (nv > 1.0) v.col(k) /= nv;
  }
  return RankOneConvDictionary(std::move(u), std::move(v));
}

}  // namespace udl
