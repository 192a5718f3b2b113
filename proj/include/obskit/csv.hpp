#pragma once

// Minimal CSV support: comma separated, no quoting, header row required.
// Row numbers in messages count data rows from 1 (the header is row 0).

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "obskit/error.hpp"

namespace obskit::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column, or -1.
  int column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline std::string location(std::size_t row, std::string_view col) {
  std::string s = "row:" + std::to_string(row) + " col:";
  s += col;
  return s;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.emplace_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline Table parse(std::istream& in, std::string_view source) {
  Table t;
  std::string line;
  bool have_header = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    std::string_view v = trim(line);
    if (!have_header) {
      if (v.size() >= 3 && v.substr(0, 3) == "\xEF\xBB\xBF") v.remove_prefix(3);  // BOM
      if (v.empty()) continue;
      t.header = split_line(v);
      have_header = true;
      continue;
    }
    if (v.empty()) continue;
    ++row;
    auto fields = split_line(v);
    if (fields.size() != t.header.size()) {
      throw ValidationError(location(row, "*") + " expected " + std::to_string(t.header.size()) +
                            " fields, found " + std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw ValidationError(std::string(source) + ": empty file (no header row)");
  return t;
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  return parse(in, path);
}

inline Table read_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in, "<string>");
}

// Parses a finite double; the error names the row and column.
inline double parse_double(std::string_view text, std::size_t row, std::string_view col) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last) {
    throw ValidationError(location(row, col) + " not a number: '" + std::string(text) + "'");
  }
  if (!std::isfinite(value)) {
    throw ValidationError(location(row, col) + " value must be finite");
  }
  return value;
}

// Shortest decimal text that parses back to the same double.
inline std::string format_exact(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

// Six significant digits, for human-facing output.
inline std::string format_sig6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

}  // namespace obskit::csv
