#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "difflab/config.hpp"
#include "difflab/numerics.hpp"

namespace difflab {

// Shortest round-trip decimal form; locale-independent and deterministic so
// repeated runs produce byte-identical CSVs.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Comma-separated, '.' decimal, one header row, LF line endings.
class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw config_error("cannot open output file: " + path.string());
  }

  void header(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (i) out_ << ',';
      out_ << names[i];
    }
    out_ << '\n';
  }

  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      out_ << format_double(values[i]);
    }
    out_ << '\n';
  }

  void row_with_tag(const std::vector<double>& values, std::uint64_t tag) {
    for (const double v : values) out_ << format_double(v) << ',';
    out_ << tag << '\n';
  }

 private:
  std::ofstream out_;
};

// 8-bit grayscale PGM (P5), row-major; value range mapped 0 = min, 255 = max.
inline void write_pgm(const std::filesystem::path& path, const Mat& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open output file: " + path.string());
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  out << "P5\n" << values.cols() << ' ' << values.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double rel = (values(r, c) - lo) / span;
      out.put(static_cast<char>(static_cast<unsigned char>(255.0 * rel + 0.5)));
    }
}

// One point per row, D columns, no header.
inline Mat read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open data file: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && rows.front().size() != row.size())
      throw config_error("ragged rows in data file: " + path.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw config_error("empty data file: " + path.string());
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.front().size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

// Flat key = value metrics file (sorted by key, deterministic).
inline void write_metrics_kv(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, double>>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open output file: " + path.string());
  out << "{\n";
  for (std::size_t i = 0; i < kv.size(); ++i) {
    out << "  \"" << kv[i].first << "\": " << format_double(kv[i].second);
    out << (i + 1 < kv.size() ? ",\n" : "\n");
  }
  out << "}\n";
}

}  // namespace difflab
