#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "udl/datagen.hpp"
#include "udl/linops.hpp"
#include "udl/rng.hpp"

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

Vec random_vec(Index n, std::uint64_t seed) {
  CounterRng rng(seed);
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.next_gaussian();
  return v;
}

}  // namespace

TEST_CASE("dense apply and adjoint match direct identities", "[linops]") {
  DenseDictionary eye{Mat::Identity(2, 2)};
  Vec z(2);
  z << 1.5, 0.0;
  REQUIRE(eye.apply(z).isApprox(z));
  Vec r(2);
  r << 2.0, 0.3;
  REQUIRE(eye.adjoint(r).isApprox(r));
}

TEST_CASE("dense apply equals naive triple-loop product", "[linops]") {
  const Mat d = random_mat(30, 50, 11);
  const Mat z = gen_bernoulli_gaussian(50, 7, 0.3, 1.0, 12);
  const DenseDictionary dict(d);
  const Mat expected = oracles::naive_product(d, z);
  REQUIRE((dict.apply_batch(z) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("adjointness holds on random instances for every form", "[linops]") {
  SECTION("dense 30x50") {
    const DenseDictionary dict(random_mat(30, 50, 21));
    for (int trial = 0; trial < 5; ++trial) {
      const Vec z = random_vec(50, 100 + trial);
      const Vec r = random_vec(30, 200 + trial);
      const double lhs = dict.apply(z).dot(r);
      const double rhs = z.dot(dict.adjoint(r));
      REQUIRE(std::abs(lhs - rhs) <= 1e-10 * (z.norm() * r.norm()));
    }
  }
  SECTION("conv 1d") {
    ConvDictionary dict(random_mat(4, 9, 250), 1, 9);
    const Index la = 40;
    for (int trial = 0; trial < 5; ++trial) {
      const Mat z = random_mat(4, la, 300 + trial);
      const Vec r = random_vec(la + 8, 400 + trial);
      const double lhs = dict.apply(z).dot(r);
      const double rhs = (z.array() * dict.adjoint(r).array()).sum();
      REQUIRE(std::abs(lhs - rhs) <= 1e-10 * (z.norm() * r.norm()));
    }
  }
  SECTION("conv 2d") {
    ConvDictionary dict(random_mat(3, 16, 251), 4, 4);
    std::vector<Mat> codes;
    for (Index k = 0; k < 3; ++k) codes.push_back(random_mat(5, 6, 500 + k));
    const Mat image = random_mat(8, 9, 600);
    const Mat applied = dict.apply2d(codes);
    const auto adj = dict.adjoint2d(image);
    double lhs = (applied.array() * image.array()).sum();
    double rhs = 0.0;
    for (Index k = 0; k < 3; ++k) {
      rhs += (codes[static_cast<std::size_t>(k)].array() * adj[static_cast<std::size_t>(k)].array()).sum();
    }
    REQUIRE(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
  SECTION("rank-1") {
    RankOneConvDictionary dict(random_mat(3, 2, 700), random_mat(4, 2, 701));
    const Index la = 13;
    for (int trial = 0; trial < 5; ++trial) {
      const Mat z = random_mat(2, la, 800 + trial);
      const Mat r = random_mat(3, la + 3, 900 + trial);
      const double lhs = (dict.apply(z).array() * r.array()).sum();
      const double rhs = (z.array() * dict.adjoint(r).array()).sum();
      REQUIRE(std::abs(lhs - rhs) <= 1e-10 * (z.norm() * r.norm()));
    }
  }
}

TEST_CASE("rank-1 impulse response puts a spike on one channel", "[linops]") {
  Mat u(2, 1), v(3, 1);
  u << 1.0, 0.0;
  v << 1.0, 0.0, 0.0;  // unit impulse at lag 0
  RankOneConvDictionary dict(u, v);
  Mat z = Mat::Zero(1, 5);
  z(0, 2) = 1.0;
  const Mat y = dict.apply(z);
  REQUIRE(y.rows() == 2);
  REQUIRE(y.cols() == 7);
  REQUIRE(y(0, 2) == 1.0);
  REQUIRE(y.row(1).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(std::abs(y.sum() - 1.0) < 1e-15);
}

TEST_CASE("rank-1 operators match their dense materialization", "[linops]") {
  // All instances with S * t * n <= 200.
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    RankOneConvDictionary dict(random_mat(3, 2, seed * 31), random_mat(4, 2, seed * 37));
    const Index la = 16 - 4 + 1;
    const Mat op = oracles::materialize_rank1(dict, la);
    const Mat z = random_mat(2, la, seed * 41);
    const Vec lhs = oracles::vec_signal_colmajor(dict.apply(z));
    const Vec rhs = op * oracles::vec_code(z);
    REQUIRE((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);

    // adjoint equals the materialized transpose
    const Mat r = random_mat(3, la + 3, seed * 43);
    const Vec adj_lhs = oracles::vec_code(dict.adjoint(r));
    const Vec adj_rhs = op.transpose() * oracles::vec_signal_colmajor(r);
    REQUIRE((adj_lhs - adj_rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fft and direct convolutions agree", "[linops]") {
  const Vec x = random_vec(200, 5150);
  const Vec k = random_vec(48, 5151);  // above the FFT threshold
  const Vec direct = conv::conv_full_direct(x, k);
  const Vec fft = conv::conv_full_fft(x, k);
  REQUIRE((direct - fft).cwiseAbs().maxCoeff() < 1e-10 * direct.norm());

  const Vec corr_direct = conv::corr_valid_direct(x, k);
  const Vec corr_fft = conv::corr_valid(x, k);
  REQUIRE((corr_direct - corr_fft).cwiseAbs().maxCoeff() < 1e-10 * corr_direct.norm());
}

TEST_CASE("lipschitz estimates", "[linops]") {
  SECTION("identity has norm one") {
    const auto est = lipschitz(DenseDictionary(Mat::Identity(5, 5)));
    REQUIRE(est.value == Catch::Approx(1.0).epsilon(1e-5));
    REQUIRE_FALSE(est.zero_operator);
  }
  SECTION("scalar [[2]] has squared norm four") {
    const auto est = lipschitz(DenseDictionary(Mat::Constant(1, 1, 2.0)));
    REQUIRE(est.value == Catch::Approx(4.0).epsilon(1e-5));
  }
  SECTION("matches dense eigensolver oracle on random 30x50") {
    const Mat d = random_mat(30, 50, 77);
    const double truth = oracles::spectral_gram_eig(d);
    const auto est = lipschitz(DenseDictionary(d), 1e-8, 500);
    REQUIRE(std::abs(est.value / (1.0 + 1e-8) - truth) <= 1e-6 * truth);
  }
  SECTION("zero dictionary is flagged") {
    const auto est = lipschitz(DenseDictionary(Mat::Zero(3, 4)));
    REQUIRE(est.zero_operator);
    REQUIRE(est.value == 0.0);
  }
  SECTION("dominates rayleigh quotients of random probes") {
    const Mat d = random_mat(20, 35, 79);
    const auto est = lipschitz(DenseDictionary(d), 1e-6, 200);
    const Mat gram = d.transpose() * d;
    CounterRng rng(80);
    for (int i = 0; i < 100; ++i) {
      Vec z(35);
      for (Index j = 0; j < 35; ++j) z[j] = rng.next_gaussian();
      z /= z.norm();
      REQUIRE((gram * z).norm() <= est.value * (1.0 + 1e-6));
    }
  }
}

TEST_CASE("project_unit_norm", "[linops]") {
  SECTION("column (3,4) becomes (0.6,0.8)") {
    Mat d(2, 1);
    d << 3.0, 4.0;
    const auto p = project_unit_norm(DenseDictionary(d));
    REQUIRE(p.data()(0, 0) == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(p.data()(1, 0) == Catch::Approx(0.8).margin(1e-15));
  }
  SECTION("idempotent and identity on unit columns") {
    const DenseDictionary d = gen_gaussian_dict(6, 9, 123);
    const auto once = project_unit_norm(d);
    REQUIRE((once.data() - d.data()).cwiseAbs().maxCoeff() <= 1e-15);
    const auto twice = project_unit_norm(once);
    REQUIRE((twice.data() - once.data()).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("zero column is replaced and reported") {
    Mat d = Mat::Zero(4, 2);
    d.col(0) << 1.0, 0.0, 0.0, 0.0;
    ProjectionEvents events;
    const auto p = project_unit_norm(DenseDictionary(d), &events);
    REQUIRE(events.replaced_atoms == std::vector<Index>{1});
    REQUIRE(p.data().col(1).norm() == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("rank-1 normalization: unit u, v in the ball, atom preserved") {
    Mat u = 2.5 * random_mat(3, 2, 91);
    Mat v = 0.2 * random_mat(5, 2, 92);
    RankOneConvDictionary dict(u, v);
    const Mat atom0 = dict.atom(0);
    const auto p = project_unit_norm(dict);
    for (Index k = 0; k < 2; ++k) {
      REQUIRE(p.u().col(k).norm() == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(p.v().col(k).norm() <= 1.0 + 1e-12);
    }
    // scale moves between factors only (atom unchanged when v stays in ball)
    if (p.v().col(0).norm() < 1.0 - 1e-9) {
      REQUIRE((p.atom(0) - atom0).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("dimension mismatches raise shape errors naming both shapes", "[linops]") {
  const DenseDictionary dict(random_mat(4, 6, 99));
  REQUIRE_THROWS_AS(dict.apply(Vec::Zero(5)), ShapeError);
  REQUIRE_THROWS_AS(dict.adjoint(Vec::Zero(3)), ShapeError);
  try {
    dict.apply(Vec::Zero(5));
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("5") != std::string::npos);
    REQUIRE(msg.find("4x6") != std::string::npos);
  }
}
