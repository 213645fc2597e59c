#pragma once

// CSV exchange: datasets (header y0..y{p-1}, one row per sample) and dense
// matrices, written with 17 significant digits so doubles round-trip.

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/matrix.hpp"
#include "robust_ustat/ustat.hpp"

namespace robust_ustat::io {

inline std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view field, std::size_t line_no) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != last) {
    throw DataError("line " + std::to_string(line_no) + ": cannot parse number '" + std::string(field) + "'");
  }
  if (!std::isfinite(v)) throw DataError("line " + std::to_string(line_no) + ": non-finite value");
  return v;
}

inline bool skip_line(std::string_view s) { return s.empty() || s.front() == '#'; }

}  // namespace detail

inline void write_dataset_csv(std::ostream& os, const Dataset& data) {
  for (Index j = 0; j < data.dim(); ++j) os << (j ? "," : "") << 'y' << j;
  os << '\n';
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) os << (j ? "," : "") << format_double(data.samples()(j, i));
    os << '\n';
  }
}

/// Reads a dataset CSV. Blank lines and lines starting with '#' are
/// skipped; errors name the 1-based line number.
inline Dataset read_dataset_csv(std::istream& is, DatasetInfo info = {}) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  bool have_header = false;
  std::vector<double> values;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string_view s = detail::trim(line);
    if (detail::skip_line(s)) continue;
    const auto fields = detail::split(s);
    if (!have_header) {
      have_header = true;
      width = fields.size();
      for (std::size_t j = 0; j < fields.size(); ++j) {
        if (fields[j] != "y" + std::to_string(j)) {
          throw DataError("line " + std::to_string(line_no) + ": expected header column 'y" + std::to_string(j) +
                          "', found '" + std::string(fields[j]) + "'");
        }
      }
      continue;
    }
    if (fields.size() != width) {
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(width) + " fields, found " +
                      std::to_string(fields.size()));
    }
    for (const auto& f : fields) values.push_back(detail::parse_double(f, line_no));
  }
  if (!have_header) throw DataError("dataset CSV is empty");
  const auto n = static_cast<Index>(values.size() / width);
  if (n < 1) throw DataError("dataset CSV has no samples");
  Matrix samples(static_cast<Index>(width), n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < static_cast<Index>(width); ++j) {
      samples(j, i) = values[static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j)];
    }
  }
  return Dataset(std::move(samples), std::move(info));
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  DatasetInfo info;
  info.source = path;
  return read_dataset_csv(in, std::move(info));
}

/// One matrix row per line, preceded by a `# schema=1` comment.
inline void write_matrix_csv(std::ostream& os, const Matrix& m) {
  os << "# schema=1\n";
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << format_double(m(i, j));
    os << '\n';
  }
}

inline Matrix read_matrix_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string_view s = detail::trim(line);
    if (detail::skip_line(s)) continue;
    std::vector<double> row;
    for (const auto& f : detail::split(s)) row.push_back(detail::parse_double(f, line_no));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError("line " + std::to_string(line_no) + ": ragged matrix row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace robust_ustat::io
