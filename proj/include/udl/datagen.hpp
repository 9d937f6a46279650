#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "udl/core.hpp"
#include "udl/linops.hpp"
#include "udl/rng.hpp"

namespace udl {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct SyntheticSpec {
  Index m = 30;
  Index n = 50;
  Index t_samples = 1000;
  double sparsity = 0.3;
  double sigma_z = 1.0;        // variance of nonzero code entries
  double noise_var = 0.1;
  double perturbation = 0.5;   // dictionary perturbation scale for init studies
  std::uint64_t seed = 0;

  void validate() const {
    if (m <= 0 || n <= 0 || t_samples <= 0) throw ConfigError("SyntheticSpec: dims must be positive");
    if (sparsity <= 0.0 || sparsity > 1.0) throw ConfigError("SyntheticSpec: sparsity in (0,1]");
    if (sigma_z <= 0.0) throw ConfigError("SyntheticSpec: sigma_z must be positive");
    if (noise_var < 0.0 || perturbation < 0.0) {
      throw ConfigError("SyntheticSpec: variances must be nonnegative");
    }
  }
};

/// i.i.d. standard normal entries (drawn in storage order), columns normalized.
inline DenseDictionary gen_gaussian_dict(Index m, Index n, std::uint64_t seed) {
  CounterRng rng(seed);
  Mat d(m, n);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < m; ++i) d(i, j) = rng.next_gaussian();
  }
  return project_unit_norm(DenseDictionary(std::move(d)));
}

/// Entry nonzero with probability `sparsity`, value N(0, sigma^2). Each entry
/// consumes one uniform and one gaussian regardless of the outcome, so the
/// support pattern and values are stable functions of (seed, entry index).
inline Mat gen_bernoulli_gaussian(Index n, Index t_samples, double sparsity, double sigma,
                                  std::uint64_t seed) {
  CounterRng rng(seed);
  Mat z(n, t_samples);
  for (Index j = 0; j < t_samples; ++j) {
    for (Index i = 0; i < n; ++i) {
      const double active = rng.next_unit();
      const double value = rng.next_gaussian();
      z(i, j) = active < sparsity ? sigma * value : 0.0;
    }
  }
  return z;
}

/// Y = D Z + B with B i.i.d. N(0, noise_var).
inline Mat gen_observations(const DenseDictionary& dict, const Mat& codes, double noise_var,
                            std::uint64_t seed) {
  Mat y = dict.apply_batch(codes);
  if (noise_var > 0.0) {
    CounterRng rng(seed);
    const double sd = std::sqrt(noise_var);
    for (Index j = 0; j < y.cols(); ++j) {
      for (Index i = 0; i < y.rows(); ++i) y(i, j) += sd * rng.next_gaussian();
    }
  }
  return y;
}

/// D + noise with variance scale * (empirical entry variance of D), columns
/// re-normalized. scale = 0 returns the input unchanged.
inline DenseDictionary perturb_dict(const DenseDictionary& dict, double scale,
                                    std::uint64_t seed) {
  if (scale == 0.0) return dict;
  const Mat& d = dict.data();
  const double mean = d.mean();
  const double var = (d.array() - mean).square().sum() / static_cast<double>(d.size());
  const double sd = std::sqrt(scale * var);
  CounterRng rng(seed);
  Mat out = d;
  for (Index j = 0; j < out.cols(); ++j) {
    for (Index i = 0; i < out.rows(); ++i) out(i, j) += sd * rng.next_gaussian();
  }
  return project_unit_norm(DenseDictionary(std::move(out)));
}

struct RankOneSynthetic {
  RankOneConvDictionary dict;
  Mat activations;  // n x (T - t + 1)
  Mat signal;       // S x T
};

/// Ground-truth rank-1 convolutional instance: unit spatial maps, smooth
/// (4-tap moving average) unit temporal patterns, Bernoulli-Gaussian spike
/// trains, observations from the forward model plus noise.
inline RankOneSynthetic gen_rank1_conv_data(Index channels, Index kernel_len, Index atoms,
                                            Index t_total, double spike_rate, double noise_var,
                                            std::uint64_t seed) {
  require_shape(t_total >= kernel_len, "gen_rank1_conv_data: need T >= kernel length");
  CounterRng rng(seed);
  Mat u(channels, atoms);
  Mat v(kernel_len, atoms);
  for (Index k = 0; k < atoms; ++k) {
    for (Index i = 0; i < channels; ++i) u(i, k) = rng.next_gaussian();
    u.col(k) /= u.col(k).norm();
    Vec white(kernel_len);
    for (Index i = 0; i < kernel_len; ++i) white[i] = rng.next_gaussian();
    for (Index i = 0; i < kernel_len; ++i) {
      double acc = 0.0;
      int taps = 0;
      for (Index d = 0; d < 4 && i - d >= 0; ++d, ++taps) acc += white[i - d];
      // Burst-like envelope: temporal patterns decay towards both ends, which
      // keeps shift-equivalent minima of the convolutional model at full
      // correlation under the shift-tolerant metric.
      const double envelope =
          std::sin(kPi * (static_cast<double>(i) + 0.5) / static_cast<double>(kernel_len));
      v(i, k) = envelope * envelope * acc / static_cast<double>(taps);
    }
    v.col(k) /= v.col(k).norm();
  }
  RankOneSynthetic out;
  out.dict = RankOneConvDictionary(std::move(u), std::move(v));

  const Index la = t_total - kernel_len + 1;
  out.activations = Mat::Zero(atoms, la);
  for (Index k = 0; k < atoms; ++k) {
    for (Index j = 0; j < la; ++j) {
      const double active = rng.next_unit();
      const double amplitude = rng.next_gaussian();
      if (active < spike_rate) out.activations(k, j) = amplitude;
    }
  }
  out.signal = out.dict.apply(out.activations);
  if (noise_var > 0.0) {
    const double sd = std::sqrt(noise_var);
    for (Index j = 0; j < out.signal.cols(); ++j) {
      for (Index i = 0; i < out.signal.rows(); ++i) out.signal(i, j) += sd * rng.next_gaussian();
    }
  }
  return out;
}

struct PgmImage {
  Index rows = 0;
  Index cols = 0;
  Mat pixels;  // normalized to [0, 1]
};

/// Binary (P5) 8-bit PGM reader. Parse failures carry the byte offset.
inline PgmImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> ParseError { return ParseError(pos, what); };

  auto skip_space = [&]() {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
      throw fail("expected integer");
    }
    long value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + (bytes[pos] - '0');
      ++pos;
    }
    return value;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (P5)");
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (width <= 0 || height <= 0) throw fail("non-positive image dimensions");
  if (maxval != 255) throw fail("only 8-bit PGM supported (maxval 255)");
  if (pos >= bytes.size()) throw fail("missing pixel data");
  ++pos;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    throw fail("truncated pixel data");
  }
  PgmImage img;
  img.rows = height;
  img.cols = width;
  img.pixels.resize(height, width);
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      img.pixels(r, c) =
          static_cast<double>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(r * width + c)])) /
          255.0;
    }
  }
  return img;
}

inline void write_pgm(const std::string& path, const Mat& pixels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "P5\n" << pixels.cols() << " " << pixels.rows() << "\n255\n";
  for (Index r = 0; r < pixels.rows(); ++r) {
    for (Index c = 0; c < pixels.cols(); ++c) {
      const double v = std::min(1.0, std::max(0.0, pixels(r, c)));
      out.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
  }
}

struct PatchSet {
  Mat noisy;        // (patch*patch) x count, column-major flattened patches
  Mat clean;        // matching clean patches
  PgmImage image;   // clean source image
  double noise_var = 0.0;
};

/// Normalizes the image to [0, 1], adds seeded Gaussian noise, and extracts
/// `count` patches at seeded random positions, flattened column-wise.
inline PatchSet load_pgm_patches(const std::string& path, Index patch, Index count,
                                 double noise_var, std::uint64_t seed) {
  PgmImage img = load_pgm(path);
  require_shape(img.rows >= patch && img.cols >= patch,
                "load_pgm_patches: image " + shape_str(img.rows, img.cols) +
                    " smaller than patch size " + std::to_string(patch));
  CounterRng rng(seed);
  Mat noisy = img.pixels;
  if (noise_var > 0.0) {
    const double sd = std::sqrt(noise_var);
    for (Index c = 0; c < noisy.cols(); ++c) {
      for (Index r = 0; r < noisy.rows(); ++r) noisy(r, c) += sd * rng.next_gaussian();
    }
  }
  PatchSet set;
  set.image = img;
  set.noise_var = noise_var;
  set.noisy.resize(patch * patch, count);
  set.clean.resize(patch * patch, count);
  for (Index p = 0; p < count; ++p) {
    const Index r = static_cast<Index>(rng.next_unit() * static_cast<double>(img.rows - patch + 1));
    const Index c = static_cast<Index>(rng.next_unit() * static_cast<double>(img.cols - patch + 1));
    Index k = 0;
    for (Index cc = 0; cc < patch; ++cc) {
      for (Index rr = 0; rr < patch; ++rr, ++k) {
        set.noisy(k, p) = noisy(r + rr, c + cc);
        set.clean(k, p) = img.pixels(r + rr, c + cc);
      }
    }
  }
  return set;
}

}  // namespace udl
