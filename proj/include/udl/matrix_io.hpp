#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "udl/core.hpp"

namespace udl {

// UDLMAT1 container: an 8-line ASCII header followed by the raw payload.
//   line 1: "UDLMAT1"
//   line 2: dtype, always "float64"
//   line 3: ndim (1..5)
//   lines 4-8: one extent per line; unused trailing lines hold "1"
// Payload is row-major IEEE-754 float64, little-endian.

static_assert(std::endian::native == std::endian::little,
              "UDLMAT1 writer assumes a little-endian host");

inline void write_udlmat(const std::string& path, const std::vector<Index>& dims,
                         const double* data) {
  if (dims.empty() || dims.size() > 5) {
    throw IoError(path, "UDLMAT1 supports 1..5 dimensions, got " + std::to_string(dims.size()));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "UDLMAT1\n" << "float64\n" << dims.size() << "\n";
  std::size_t total = 1;
  for (std::size_t i = 0; i < 5; ++i) {
    const Index d = i < dims.size() ? dims[i] : 1;
    out << d << "\n";
    if (i < dims.size()) total *= static_cast<std::size_t>(d);
  }
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(total * sizeof(double)));
  if (!out) throw IoError(path, "short write");
}

inline void write_matrix(const std::string& path, const Mat& m) {
  // Row-major payload; Eigen stores column-major, so stage a transposed copy.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  write_udlmat(path, {m.rows(), m.cols()}, rm.data());
}

struct UdlmatArray {
  std::vector<Index> dims;
  std::vector<double> data;  // row-major
};

inline UdlmatArray read_udlmat(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::array<std::string, 8> lines;
  for (auto& line : lines) {
    if (!std::getline(in, line)) throw IoError(path, "truncated UDLMAT1 header");
  }
  if (lines[0] != "UDLMAT1") throw IoError(path, "bad magic: '" + lines[0] + "'");
  if (lines[1] != "float64") throw IoError(path, "unsupported dtype: '" + lines[1] + "'");
  int ndim = 0;
  try {
    ndim = std::stoi(lines[2]);
  } catch (const std::exception&) {
    throw IoError(path, "bad ndim line: '" + lines[2] + "'");
  }
  if (ndim < 1 || ndim > 5) throw IoError(path, "ndim out of range: " + lines[2]);

  UdlmatArray array;
  std::size_t total = 1;
  for (int i = 0; i < ndim; ++i) {
    long long d = 0;
    try {
      d = std::stoll(lines[static_cast<std::size_t>(3 + i)]);
    } catch (const std::exception&) {
      throw IoError(path, "bad dim line " + std::to_string(4 + i));
    }
    if (d <= 0) throw IoError(path, "non-positive dimension in header");
    array.dims.push_back(static_cast<Index>(d));
    total *= static_cast<std::size_t>(d);
  }
  array.data.resize(total);
  in.read(reinterpret_cast<char*>(array.data.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(total * sizeof(double))) {
    throw IoError(path, "truncated payload");
  }
  return array;
}

inline Mat read_matrix(const std::string& path) {
  UdlmatArray array = read_udlmat(path);
  if (array.dims.size() != 2) {
    throw IoError(path, "expected 2-dimensional array, got ndim=" +
                            std::to_string(array.dims.size()));
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> map(
      array.data.data(), array.dims[0], array.dims[1]);
  return Mat(map);
}

}  // namespace udl
