#pragma once

#include "fedhte/error.hpp"
#include "fedhte/model_core.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fedhte {

// Which CSV header names play which role.
struct CsvSchema {
  std::string outcome = "Y";
  std::string treatment = "A";
  std::vector<std::string> covariates;  // empty: every remaining column
  std::vector<std::string> modifiers;
  char delimiter = ',';
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = (b == std::string::npos) ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_cell(const std::string& s, std::size_t row, const std::string& col,
                         const std::string& path) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw DataError(path + ": row " + std::to_string(row) + ", column '" + col +
                    "': non-finite or unparsable value '" + s + "'");
  }
  return v;
}

}  // namespace detail

// Reads a header-first delimited file. Row numbers in errors count data rows
// from 1 (the header is not a row).
inline ObservationTable load_csv(const std::filesystem::path& path, const CsvSchema& schema,
                                 std::string site_id = {}) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open '" + path.string() + "'");
  }
  if (site_id.empty()) site_id = path.stem().string();
  const std::string where = path.string();

  std::string line;
  if (!std::getline(in, line)) {
    throw DataError(where + ": missing header row");
  }
  const auto header = detail::split_csv_line(line, schema.delimiter);
  std::map<std::string, std::size_t> pos;
  for (std::size_t j = 0; j < header.size(); ++j) pos[header[j]] = j;

  auto require = [&](const std::string& name) {
    auto it = pos.find(name);
    if (it == pos.end()) throw ConfigError(where + ": missing column '" + name + "'");
    return it->second;
  };
  const std::size_t y_col = require(schema.outcome);
  const std::size_t a_col = require(schema.treatment);
  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (const auto& h : header) {
      if (h != schema.outcome && h != schema.treatment) cov_names.push_back(h);
    }
  }
  std::vector<std::size_t> cov_cols;
  for (const auto& c : cov_names) cov_cols.push_back(require(c));

  std::vector<double> ys, as;
  std::vector<std::vector<double>> xs;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    const auto cells = detail::split_csv_line(line, schema.delimiter);
    if (cells.size() != header.size()) {
      throw DataError(where + ": row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " fields, header has " +
                      std::to_string(header.size()));
    }
    ys.push_back(detail::parse_cell(cells[y_col], row, schema.outcome, where));
    const double a = detail::parse_cell(cells[a_col], row, schema.treatment, where);
    if (a != 0.0 && a != 1.0) {
      throw DataError(where + ": row " + std::to_string(row) + ", column '" + schema.treatment +
                      "': treatment must be 0 or 1, got '" + cells[a_col] + "'");
    }
    as.push_back(a);
    std::vector<double> xr;
    xr.reserve(cov_cols.size());
    for (std::size_t j = 0; j < cov_cols.size(); ++j) {
      xr.push_back(detail::parse_cell(cells[cov_cols[j]], row, cov_names[j], where));
    }
    xs.push_back(std::move(xr));
  }
  if (row == 0) {
    throw DataError(where + ": n >= 1 violated (no data rows)");
  }

  const auto n = static_cast<Eigen::Index>(row);
  Vector y(n), a(n);
  Matrix x(n, static_cast<Eigen::Index>(cov_names.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = ys[static_cast<std::size_t>(i)];
    a[i] = as[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      x(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  std::vector<Eigen::Index> mods;
  for (const auto& m : schema.modifiers) {
    auto it = std::find(cov_names.begin(), cov_names.end(), m);
    if (it == cov_names.end()) {
      throw ConfigError(where + ": modifier '" + m + "' is not a covariate column");
    }
    mods.push_back(static_cast<Eigen::Index>(it - cov_names.begin()));
  }
  return ObservationTable(std::move(site_id), std::move(y), std::move(a), std::move(x),
                          std::move(cov_names), std::move(mods));
}

// Writes `contents` to a sibling temp file and renames it over `path`, so
// readers never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
    out << contents;
    out.flush();
    if (!out) throw ConfigError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string to_csv(const ObservationTable& t, const std::string& outcome = "Y",
                          const std::string& treatment = "A") {
  std::ostringstream out;
  out << std::setprecision(17);
  out << outcome << ',' << treatment;
  for (const auto& c : t.covariate_names()) out << ',' << c;
  out << '\n';
  for (Eigen::Index i = 0; i < t.n(); ++i) {
    out << t.outcome()[i] << ',' << t.treatment()[i];
    for (Eigen::Index j = 0; j < t.p(); ++j) out << ',' << t.covariates()(i, j);
    out << '\n';
  }
  return out.str();
}

}  // namespace fedhte
