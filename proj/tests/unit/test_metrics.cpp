#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "udl/datagen.hpp"
#include "udl/metrics.hpp"

using namespace udl;

namespace {

Mat random_mat(Index r, Index c, std::uint64_t seed) {
  CounterRng rng(seed);
  Mat m(r, c);
  for (Index j = 0; j < c; ++j) {
    for (Index i = 0; i < r; ++i) m(i, j) = rng.next_gaussian();
  }
  return m;
}

}  // namespace

TEST_CASE("assignment score basics", "[metrics]") {
  REQUIRE(assignment_score(Mat::Identity(4, 4)) == 1.0);

  Mat c(2, 2);
  c << 0.9, 0.1, 0.2, 0.8;
  REQUIRE(assignment_score(c) == Catch::Approx(0.85).margin(1e-15));
}

TEST_CASE("hungarian equals brute force on random matrices up to n=6", "[metrics]") {
  CounterRng rng(4100);
  for (Index n = 1; n <= 6; ++n) {
    for (int rep = 0; rep < 40; ++rep) {
      Mat c(n, n);
      for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < n; ++i) c(i, j) = 2.0 * rng.next_unit() - 1.0;
      }
      REQUIRE(assignment_score(c) ==
              Catch::Approx(oracles::brute_force_assignment_score(c)).margin(1e-12));
    }
  }
}

TEST_CASE("recovery score invariances", "[metrics]") {
  const DenseDictionary d = gen_gaussian_dict(10, 8, 4200);
  REQUIRE(recovery_score(d, d) == Catch::Approx(1.0).margin(1e-12));

  // column permutation + sign flips leave the score at 1
  Mat shuffled(10, 8);
  const std::vector<int> perm{3, 1, 7, 0, 5, 2, 6, 4};
  for (Index j = 0; j < 8; ++j) {
    shuffled.col(j) = (j % 2 == 0 ? -1.0 : 1.0) * d.data().col(perm[static_cast<std::size_t>(j)]);
  }
  REQUIRE(recovery_score(d, DenseDictionary(shuffled)) == Catch::Approx(1.0).margin(1e-12));

  // a fresh random dictionary scores clearly lower
  const DenseDictionary other = gen_gaussian_dict(10, 8, 4300);
  REQUIRE(recovery_score(d, other) < 0.9);

  REQUIRE_THROWS_AS(recovery_score(d, gen_gaussian_dict(10, 9, 1)), ShapeError);
}

TEST_CASE("convolutional score is shift tolerant", "[metrics]") {
  Mat kernels = random_mat(3, 12, 4400);
  for (Index k = 0; k < 3; ++k) kernels.row(k) /= kernels.row(k).norm();
  const ConvDictionary a(kernels, 1, 12);
  // circularly shift every kernel by a different amount and flip one sign
  Mat shifted(3, 12);
  for (Index k = 0; k < 3; ++k) {
    for (Index i = 0; i < 12; ++i) shifted(k, (i + 2 * (k + 1)) % 12) = kernels(k, i);
  }
  shifted.row(1) *= -1.0;
  const ConvDictionary b(shifted, 1, 12);
  REQUIRE(recovery_score(a, b) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("rank-1 score reports factors separately", "[metrics]") {
  const auto data = gen_rank1_conv_data(6, 10, 3, 100, 0.05, 0.0, 4500);
  const auto self = recovery_score(data.dict, data.dict);
  REQUIRE(self.u_corr == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(self.v_corr == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(self.mean == Catch::Approx(1.0).margin(1e-12));

  // shifting v circularly and flipping u signs keeps both scores at 1
  Mat u = data.dict.u(), v = data.dict.v();
  u.col(0) *= -1.0;
  Mat v_shift = v;
  for (Index i = 0; i < v.rows(); ++i) v_shift((i + 3) % v.rows(), 1) = v(i, 1);
  v_shift.col(1) /= v_shift.col(1).norm();
  const RankOneConvDictionary moved(u, v_shift);
  const auto score = recovery_score(data.dict, moved);
  REQUIRE(score.u_corr == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(score.v_corr == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("cosine angle", "[metrics]") {
  const Mat g = random_mat(5, 7, 4600);
  REQUIRE(*cosine_angle(g, g) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(*cosine_angle(g, Mat(-g)) == Catch::Approx(-1.0).margin(1e-12));

  Mat a = Mat::Zero(2, 2), b = Mat::Zero(2, 2);
  a(0, 0) = 1.0;
  b(1, 1) = 1.0;
  REQUIRE(*cosine_angle(a, b) == 0.0);

  REQUIRE_FALSE(cosine_angle(Mat::Zero(3, 3), g).has_value());

  // scale invariance and sign flip
  REQUIRE(*cosine_angle(Mat(2.5 * g), g) == Catch::Approx(1.0).margin(1e-12));
  const Mat h = random_mat(5, 7, 4601);
  const double base = *cosine_angle(g, h);
  REQUIRE(*cosine_angle(Mat(0.3 * g), h) == Catch::Approx(base).margin(1e-12));
  REQUIRE(*cosine_angle(Mat(-0.3 * g), h) == Catch::Approx(-base).margin(1e-12));
}

TEST_CASE("relative angle difference", "[metrics]") {
  const Mat g_ref = random_mat(4, 6, 4700);
  const Mat g1 = random_mat(4, 6, 4701);

  SECTION("g2 equal to the reference gives one") {
    REQUIRE(*relative_angle_difference(g1, g_ref, g_ref) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("g2 equal to g1 gives zero") {
    REQUIRE(*relative_angle_difference(g1, g1, g_ref) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("direct arithmetic: cosines 0.5 and 0.75 give 0.5") {
    // construct gradients with prescribed cosines against a unit reference
    Mat ref = Mat::Zero(2, 2);
    ref(0, 0) = 1.0;
    Mat a = Mat::Zero(2, 2), b = Mat::Zero(2, 2);
    a(0, 0) = 0.5;
    a(1, 1) = std::sqrt(1.0 - 0.25);
    b(0, 0) = 0.75;
    b(1, 1) = std::sqrt(1.0 - 0.5625);
    REQUIRE(*relative_angle_difference(a, b, ref) == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("indeterminate when g1 is aligned with the reference") {
    REQUIRE_FALSE(relative_angle_difference(g_ref, g1, g_ref).has_value());
  }
}

TEST_CASE("psnr and snr", "[metrics]") {
  SECTION("mse 0.01 at unit peak gives 20 dB") {
    Mat ref = Mat::Zero(10, 10);
    Mat est = Mat::Constant(10, 10, 0.1);
    REQUIRE(psnr(ref, est, 1.0) == Catch::Approx(20.0).margin(1e-12));
  }
  SECTION("identical signals give the infinity sentinel") {
    const Mat m = random_mat(4, 4, 4800);
    REQUIRE(std::isinf(psnr(m, m, 1.0)));
  }
  SECTION("matches a naive two-pass loop") {
    const Mat a = random_mat(6, 9, 4900);
    const Mat b = a + 0.05 * random_mat(6, 9, 4901);
    double mse = 0.0;
    for (Index j = 0; j < a.cols(); ++j) {
      for (Index i = 0; i < a.rows(); ++i) {
        mse += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
      }
    }
    mse /= static_cast<double>(a.size());
    REQUIRE(psnr(a, b, 2.0) == Catch::Approx(10.0 * std::log10(4.0 / mse)).margin(1e-10));
  }
  SECTION("monotone in added noise") {
    const Mat ref = random_mat(8, 8, 5000);
    double prev = std::numeric_limits<double>::infinity();
    for (double sd : {0.01, 0.05, 0.2, 1.0}) {
      const Mat noisy = ref + sd * random_mat(8, 8, 5001);
      const double value = psnr(ref, noisy, 1.0);
      REQUIRE(value < prev);
      prev = value;
    }
  }
  SECTION("snr ratios") {
    REQUIRE(snr(1.0, 1.0) == 0.0);
    REQUIRE(snr(1.0, 0.1) == Catch::Approx(10.0).margin(1e-12));
    REQUIRE(snr(1.0, 0.01) == Catch::Approx(20.0).margin(1e-12));
  }
}

TEST_CASE("loss line scan endpoints and degeneracy", "[metrics]") {
  const DenseDictionary a = gen_gaussian_dict(8, 12, 5100);
  const DenseDictionary b = gen_gaussian_dict(8, 12, 5101);
  const Mat z = gen_bernoulli_gaussian(12, 20, 0.3, 1.0, 5102);
  const Mat y = gen_observations(a, z, 0.05, 5103);
  UnrollConfig cfg;
  cfg.algorithm = Algorithm::Fista;
  cfg.lambda = 0.2;
  cfg.n_iters = 15;

  const auto curve = loss_line_scan(a, b, y, cfg, 7);
  REQUIRE(curve.size() == 7);
  REQUIRE(curve.front().t == 0.0);
  REQUIRE(curve.back().t == 1.0);
  REQUIRE(curve.front().loss ==
          Catch::Approx(dense_batch::unrolled_loss(a, y, cfg)).margin(0.0));
  REQUIRE(curve.back().loss ==
          Catch::Approx(dense_batch::unrolled_loss(b, y, cfg)).margin(0.0));
  for (const auto& p : curve) REQUIRE(std::isfinite(p.loss));

  const auto flat = loss_line_scan(a, a, y, cfg, 5);
  for (const auto& p : flat) REQUIRE(p.loss == flat.front().loss);
}
