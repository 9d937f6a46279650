#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "udl/matrix_io.hpp"
#include "udl/rng.hpp"

using namespace udl;

TEST_CASE("counter rng is a pure function of its seed", "[rng]") {
  CounterRng a(42), b(42);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

  CounterRng c(42), d(43);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += c.next_u64() == d.next_u64();
  REQUIRE(same == 0);
}

TEST_CASE("sub-streams are deterministic and distinct", "[rng]") {
  CounterRng root(7);
  CounterRng s0 = root.stream(0);
  CounterRng s1 = root.stream(1);
  CounterRng s0_again = CounterRng(7).stream(0);
  REQUIRE(s0.next_u64() == s0_again.next_u64());
  REQUIRE(CounterRng(7).stream(0).next_u64() != s1.next_u64());
}

TEST_CASE("uniform and gaussian draws look sane", "[rng]") {
  CounterRng rng(123);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.next_unit();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  REQUIRE(std::abs(sum / n - 0.5) < 0.01);

  CounterRng g(321);
  sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = g.next_gaussian();
    sum += x;
    sum_sq += x * x;
  }
  REQUIRE(std::abs(sum / n) < 0.02);
  REQUIRE(std::abs(sum_sq / n - 1.0) < 0.03);
}

TEST_CASE("udlmat round trip preserves matrices exactly", "[io]") {
  const auto path = std::filesystem::temp_directory_path() / "udl_test_roundtrip.mat";
  Mat m(3, 4);
  CounterRng rng(5);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng.next_gaussian();
  }
  write_matrix(path.string(), m);
  const Mat back = read_matrix(path.string());
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 4);
  REQUIRE((back - m).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("udlmat header is eight ascii lines", "[io]") {
  const auto path = std::filesystem::temp_directory_path() / "udl_test_header.mat";
  write_matrix(path.string(), Mat::Identity(2, 2));
  std::ifstream in(path.string(), std::ios::binary);
  std::string line;
  std::vector<std::string> lines;
  for (int i = 0; i < 8; ++i) {
    REQUIRE(static_cast<bool>(std::getline(in, line)));
    lines.push_back(line);
  }
  REQUIRE(lines[0] == "UDLMAT1");
  REQUIRE(lines[1] == "float64");
  REQUIRE(lines[2] == "2");
  REQUIRE(lines[3] == "2");
  REQUIRE(lines[4] == "2");
  REQUIRE(lines[5] == "1");
  std::filesystem::remove(path);
}

TEST_CASE("udlmat reader rejects malformed input", "[io]") {
  const auto path = std::filesystem::temp_directory_path() / "udl_test_bad.mat";
  {
    std::ofstream out(path.string(), std::ios::binary);
    out << "NOTMAT\nfloat64\n2\n2\n2\n1\n1\n1\n";
  }
  REQUIRE_THROWS_AS(read_matrix(path.string()), IoError);
  std::filesystem::remove(path);
}
