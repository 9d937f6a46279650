#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "udl/core.hpp"

namespace udl {

/// Round-trip formatting: identical doubles always print identically, so CSV
/// bodies are byte-stable across reruns.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& field) {
  bool needs = false;
  for (char c : field) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r') {
      needs = true;
      break;
    }
  }
  if (!needs) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

/// 64-bit FNV-1a; used as the spec hash stamped into every emitted file.
inline std::uint64_t fnv1a64(const std::string& payload) {
  std::uint64_t hash = 0xCBF29CE484222325ULL;
  for (unsigned char c : payload) {
    hash ^= c;
    hash *= 0x100000001B3ULL;
  }
  return hash;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// RFC-4180 body preceded by one '#'-prefixed JSON metadata line. The
/// metadata line is the only place timestamps may appear; rows must be pure
/// functions of spec + seed.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& meta_json,
            const std::vector<std::string>& header, bool flush_rows = false)
      : out_(path, std::ios::binary | std::ios::trunc), path_(path), flush_rows_(flush_rows) {
    if (!out_) throw IoError(path, "cannot open for writing");
    out_ << "# " << meta_json << "\r\n";
    write_row(header);
  }

  void write_row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ",";
      out_ << csv_quote(fields[i]);
    }
    out_ << "\r\n";
    if (flush_rows_) out_.flush();
    if (!out_) throw IoError(path_, "write failed");
  }

  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
  bool flush_rows_;
};

/// One training-step row. Wall-clock seconds are kept out of CSV bodies and
/// emitted to a JSON-lines timing sidecar instead.
struct RecordRow {
  int step = 0;
  int epoch = 0;
  int phase = 1;
  double loss = 0.0;
  double score = std::numeric_limits<double>::quiet_NaN();
  int backtracks = 0;
  double step_size = 0.0;
  double grad_norm = 0.0;
  int flags = 0;
  double seconds = 0.0;
};

struct RunRecord {
  std::string meta_json;
  std::vector<RecordRow> rows;

  static std::vector<std::string> header() {
    return {"step", "epoch", "phase", "loss", "score", "backtracks",
            "step_size", "grad_norm", "flags"};
  }

  static std::vector<std::string> fields(const RecordRow& r) {
    return {std::to_string(r.step),      std::to_string(r.epoch),
            std::to_string(r.phase),     format_double(r.loss),
            format_double(r.score),      std::to_string(r.backtracks),
            format_double(r.step_size),  format_double(r.grad_norm),
            std::to_string(r.flags)};
  }

  void write_csv(const std::string& path) const {
    CsvWriter writer(path, meta_json, header());
    for (const auto& r : rows) writer.write_row(fields(r));
  }

  void write_timing(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, "cannot open for writing");
    for (const auto& r : rows) {
      out << "{\"step\":" << r.step << ",\"epoch\":" << r.epoch
          << ",\"seconds\":" << format_double(r.seconds) << "}\n";
    }
  }
};

}  // namespace udl
