#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lmmboot/types.hpp"

namespace lmmboot::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // excluding header
};

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // trim spaces and a trailing CR
    std::size_t b = field.find_first_not_of(" \t\r");
    std::size_t e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline Table read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  Table t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
    } else {
      if (fields.size() != t.header.size()) {
        throw ValidationError(path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(t.header.size()) + " fields, got " +
                              std::to_string(fields.size()));
      }
      t.rows.push_back(std::move(fields));
    }
  }
  if (t.header.empty()) throw ValidationError(path + ": empty file");
  return t;
}

inline double parse_double(const std::string& s, const std::string& path, std::size_t lineno,
                           const std::string& column) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || end != begin + s.size()) {
    throw ValidationError(path + ":" + std::to_string(lineno) + ": column '" + column +
                          "': '" + s + "' is not a number");
  }
  return v;
}

/// Loads observation rows from a CSV with required columns `cluster` and `y`;
/// `covariates` selects the fixed-effect columns (empty = all other columns,
/// in file order).
inline std::vector<DataRow> load_rows(const std::string& path,
                                      std::vector<std::string> covariates = {}) {
  const Table t = read(path);
  auto col_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < t.header.size(); ++i) {
      if (t.header[i] == name) return static_cast<long>(i);
    }
    return -1L;
  };
  const long cluster_col = col_index("cluster");
  const long y_col = col_index("y");
  if (cluster_col < 0) throw ValidationError(path + ": missing required column 'cluster'");
  if (y_col < 0) throw ValidationError(path + ": missing required column 'y'");
  if (covariates.empty()) {
    for (const auto& h : t.header) {
      if (h != "cluster" && h != "y") covariates.push_back(h);
    }
  }
  std::vector<long> cov_cols;
  for (const auto& name : covariates) {
    const long idx = col_index(name);
    if (idx < 0) throw ValidationError(path + ": declared covariate column '" + name +
                                       "' not found");
    cov_cols.push_back(idx);
  }
  std::vector<DataRow> rows;
  rows.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::size_t lineno = r + 2;  // header is line 1
    DataRow row;
    row.cluster_id = t.rows[r][static_cast<std::size_t>(cluster_col)];
    row.y = parse_double(t.rows[r][static_cast<std::size_t>(y_col)], path, lineno, "y");
    row.covariates.reserve(cov_cols.size());
    for (std::size_t c = 0; c < cov_cols.size(); ++c) {
      row.covariates.push_back(parse_double(t.rows[r][static_cast<std::size_t>(cov_cols[c])],
                                            path, lineno, covariates[c]));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError(path + ": no data rows");
  return rows;
}

/// Full-precision double formatting so written values round-trip exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace lmmboot::csv
