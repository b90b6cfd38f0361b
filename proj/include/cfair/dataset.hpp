#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "cfair/errors.hpp"
#include "cfair/random.hpp"
#include "cfair/types.hpp"

namespace cfair {

// Per-column z-score parameters for one block of a dataset.
struct BlockStats {
  std::vector<double> mean;
  std::vector<double> std;

  static BlockStats identity(Index cols) {
    return {std::vector<double>(static_cast<std::size_t>(cols), 0.0),
            std::vector<double>(static_cast<std::size_t>(cols), 1.0)};
  }

  // Population mean/std; a zero std (constant column) is replaced by 1.
  static BlockStats fit(const Matrix& m) {
    BlockStats s = identity(m.cols());
    const double n = static_cast<double>(m.rows());
    for (Index c = 0; c < m.cols(); ++c) {
      const double mu = m.col(c).sum() / n;
      const double var = (m.col(c).array() - mu).square().sum() / n;
      s.mean[static_cast<std::size_t>(c)] = mu;
      s.std[static_cast<std::size_t>(c)] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& raw) const {
    Matrix out = raw;
    for (Index c = 0; c < out.cols(); ++c)
      out.col(c) = (out.col(c).array() - mean[static_cast<std::size_t>(c)]) /
                   std[static_cast<std::size_t>(c)];
    return out;
  }

  Matrix invert(const Matrix& normalized) const {
    Matrix out = normalized;
    for (Index c = 0; c < out.cols(); ++c)
      out.col(c) = out.col(c).array() * std[static_cast<std::size_t>(c)] +
                   mean[static_cast<std::size_t>(c)];
    return out;
  }

  friend bool operator==(const BlockStats&, const BlockStats&) = default;
};

/// Rows of (a, x, y) triplets plus the normalization currently applied to them.
struct Dataset {
  Matrix a;
  Matrix x;
  Matrix y;
  std::vector<std::string> a_names;
  std::vector<std::string> x_names;
  std::vector<std::string> y_names;
  BlockStats a_stats;
  BlockStats x_stats;
  BlockStats y_stats;

  Index size() const { return a.rows(); }
  Index d_a() const { return a.cols(); }
  Index d_x() const { return x.cols(); }
  Index d_y() const { return y.cols(); }

  void reset_stats() {
    a_stats = BlockStats::identity(a.cols());
    x_stats = BlockStats::identity(x.cols());
    y_stats = BlockStats::identity(y.cols());
  }

  void validate() const {
    if (a.rows() != x.rows() || a.rows() != y.rows())
      throw SchemaError("dataset: a, x, y row counts differ");
    if (!all_finite(a) || !all_finite(x) || !all_finite(y))
      throw SchemaError("dataset: contains NaN or infinite values");
  }

  Dataset subset(const std::vector<Index>& rows) const {
    Dataset out = *this;
    out.a = gather_rows(a, rows);
    out.x = gather_rows(x, rows);
    out.y = gather_rows(y, rows);
    return out;
  }

  Dataset raw() const {
    Dataset out = *this;
    out.a = a_stats.invert(a);
    out.x = x_stats.invert(x);
    out.y = y_stats.invert(y);
    out.reset_stats();
    return out;
  }

  // Re-expresses the (raw) values with new normalization stats.
  Dataset normalized_with(const BlockStats& sa, const BlockStats& sx, const BlockStats& sy) const {
    Dataset out = raw();
    out.a = sa.apply(out.a);
    out.x = sx.apply(out.x);
    out.y = sy.apply(out.y);
    out.a_stats = sa;
    out.x_stats = sx;
    out.y_stats = sy;
    return out;
  }
};

/// Shuffled train/test split. Normalization stats are fit on the training
/// rows only and applied to both sides.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction,
                                         RngStream& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ArgumentError("split: train_fraction must lie in (0, 1)");
  data.validate();
  const Index n = data.size();
  const Index n_train = static_cast<Index>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) throw ArgumentError("split: one side of the split would be empty");
  const std::vector<Index> order = sample_indices(rng, n, n);
  const std::vector<Index> train_rows(order.begin(), order.begin() + n_train);
  const std::vector<Index> test_rows(order.begin() + n_train, order.end());
  const Dataset raw = data.raw();
  const Dataset train_raw = raw.subset(train_rows);
  const BlockStats sa = BlockStats::fit(train_raw.a);
  const BlockStats sx = BlockStats::fit(train_raw.x);
  const BlockStats sy = BlockStats::fit(train_raw.y);
  return {train_raw.normalized_with(sa, sx, sy), raw.subset(test_rows).normalized_with(sa, sx, sy)};
}

// ---- CSV -------------------------------------------------------------------

namespace csv {

// Splits one CSV line; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> comments;  // leading lines starting with '#', without the '#'
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  Table t;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      t.comments.push_back(trim(line.substr(1)));
      continue;
    }
    auto fields = split_line(line);
    for (auto& f : fields) f = trim(f);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw SchemaError(fmt::format("'{}': row {} has {} fields, header has {}", path.string(),
                                    t.rows.size() + 1, fields.size(), t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw SchemaError("'" + path.string() + "' has no header row");
  return t;
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw SchemaError("non-numeric value '" + s + "' in " + where);
  }
}

// Shortest decimal form that parses back to the same double.
inline std::string format_number(double v) { return fmt::format("{}", v); }

}  // namespace csv

// Writes a file via a temporary sibling and a rename, so readers never see partial output.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("'" + path.string() + "': " + e.what());
  }
}

/// CSV of the dataset's current (normalized) values: columns a..., x..., y....
/// An optional first comment line carries the config digest.
inline std::string dataset_to_csv(const Dataset& ds, const std::string& config_digest = {}) {
  std::string out;
  if (!config_digest.empty()) out += "# config_digest=" + config_digest + "\n";
  std::vector<std::string> names;
  names.insert(names.end(), ds.a_names.begin(), ds.a_names.end());
  names.insert(names.end(), ds.x_names.begin(), ds.x_names.end());
  names.insert(names.end(), ds.y_names.begin(), ds.y_names.end());
  for (std::size_t i = 0; i < names.size(); ++i) out += (i ? "," : "") + names[i];
  out += '\n';
  for (Index r = 0; r < ds.size(); ++r) {
    std::string line;
    auto emit = [&](const Matrix& m) {
      for (Index c = 0; c < m.cols(); ++c) {
        if (!line.empty()) line += ',';
        line += csv::format_number(m(r, c));
      }
    };
    emit(ds.a);
    emit(ds.x);
    emit(ds.y);
    out += line + '\n';
  }
  return out;
}

/// Sidecar describing the normalization: [{column, role, mean, std}, ...].
inline nlohmann::json normalization_sidecar(const Dataset& ds, const std::string& config_digest = {}) {
  nlohmann::json cols = nlohmann::json::array();
  auto emit = [&](const std::vector<std::string>& names, const BlockStats& s, const char* role) {
    for (std::size_t i = 0; i < names.size(); ++i)
      cols.push_back({{"column", names[i]}, {"role", role}, {"mean", s.mean[i]}, {"std", s.std[i]}});
  };
  emit(ds.a_names, ds.a_stats, "a");
  emit(ds.x_names, ds.x_stats, "x");
  emit(ds.y_names, ds.y_stats, "y");
  nlohmann::json out = {{"columns", cols}};
  if (!config_digest.empty()) out["config_digest"] = config_digest;
  return out;
}

/// Reads a dataset written by dataset_to_csv, using the sidecar for column roles and stats.
inline Dataset dataset_from_csv(const std::filesystem::path& csv_path,
                                const nlohmann::json& sidecar) {
  const csv::Table t = csv::read(csv_path);
  Dataset ds;
  std::vector<std::pair<char, std::size_t>> roles;  // per csv column: block + index within block
  try {
    const auto& cols = sidecar.at("columns");
    if (cols.size() != t.header.size())
      throw SchemaError("sidecar column count does not match '" + csv_path.string() + "'");
    for (std::size_t i = 0; i < cols.size(); ++i) {
      const auto name = cols[i].at("column").get<std::string>();
      const auto role = cols[i].at("role").get<std::string>();
      if (name != t.header[i]) throw SchemaError("sidecar column '" + name + "' out of order");
      auto push = [&](std::vector<std::string>& names, BlockStats& s) {
        roles.emplace_back(role[0], names.size());
        names.push_back(name);
        s.mean.push_back(cols[i].at("mean").get<double>());
        s.std.push_back(cols[i].at("std").get<double>());
      };
      if (role == "a") push(ds.a_names, ds.a_stats);
      else if (role == "x") push(ds.x_names, ds.x_stats);
      else if (role == "y") push(ds.y_names, ds.y_stats);
      else throw SchemaError("sidecar: unknown role '" + role + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("normalization sidecar: ") + e.what());
  }
  const auto n = static_cast<Index>(t.rows.size());
  ds.a.resize(n, static_cast<Index>(ds.a_names.size()));
  ds.x.resize(n, static_cast<Index>(ds.x_names.size()));
  ds.y.resize(n, static_cast<Index>(ds.y_names.size()));
  for (Index r = 0; r < n; ++r)
    for (std::size_t c = 0; c < roles.size(); ++c) {
      const double v = csv::parse_number(t.rows[static_cast<std::size_t>(r)][c], csv_path.string());
      const auto k = static_cast<Index>(roles[c].second);
      if (roles[c].first == 'a') ds.a(r, k) = v;
      else if (roles[c].first == 'x') ds.x(r, k) = v;
      else ds.y(r, k) = v;
    }
  ds.validate();
  return ds;
}

// ---- Communities and Crime -------------------------------------------------

inline const std::set<std::string>& crimes_identifier_columns() {
  static const std::set<std::string> cols{"state", "county", "community", "communityname", "fold"};
  return cols;
}

/// Loads the Communities and Crime table (CSV with header, "?" for missing).
///
/// Identifier columns and every column containing a missing marker are
/// dropped; constant feature columns are dropped with a warning. The result
/// is unnormalized: split() fits the z-score stats on the training rows.
inline Dataset load_crimes(const std::filesystem::path& path,
                           const std::string& sensitive_column = "racepctblack",
                           const std::string& target_column = "ViolentCrimesPerPop") {
  if (!std::filesystem::exists(path)) throw IoError("crimes file '" + path.string() + "' not found");
  const csv::Table t = csv::read(path);
  const auto find = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) throw SchemaError("crimes file has no column '" + name + "'");
    return static_cast<std::size_t>(it - t.header.begin());
  };
  const std::size_t a_col = find(sensitive_column);
  const std::size_t y_col = find(target_column);
  if (a_col == y_col) throw SchemaError("sensitive and target column are the same");

  std::vector<bool> has_missing(t.header.size(), false);
  for (const auto& row : t.rows)
    for (std::size_t c = 0; c < row.size(); ++c)
      if (row[c] == "?" || row[c].empty()) has_missing[c] = true;
  if (has_missing[a_col]) throw SchemaError("sensitive column '" + sensitive_column + "' has missing values");
  if (has_missing[y_col]) throw SchemaError("target column '" + target_column + "' has missing values");

  const auto n = static_cast<Index>(t.rows.size());
  if (n < 2) throw SchemaError("crimes file has fewer than 2 rows");
  auto column = [&](std::size_t c) {
    Vector v(n);
    for (Index r = 0; r < n; ++r)
      v(r) = csv::parse_number(t.rows[static_cast<std::size_t>(r)][c],
                               "column '" + t.header[c] + "'");
    return v;
  };
  auto constant = [](const Vector& v) { return (v.array() == v(0)).all(); };

  Dataset ds;
  const Vector a = column(a_col);
  if (constant(a)) throw SchemaError("sensitive column '" + sensitive_column + "' is constant");
  ds.a = a;
  ds.y = column(y_col);
  ds.a_names = {sensitive_column};
  ds.y_names = {target_column};

  std::vector<Vector> features;
  std::size_t dropped_missing = 0;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (c == a_col || c == y_col || crimes_identifier_columns().contains(t.header[c])) continue;
    if (has_missing[c]) {
      ++dropped_missing;
      continue;
    }
    Vector v = column(c);
    if (constant(v)) {
      spdlog::warn("crimes: dropping constant column '{}'", t.header[c]);
      continue;
    }
    features.push_back(std::move(v));
    ds.x_names.push_back(t.header[c]);
  }
  if (features.empty()) throw SchemaError("crimes file has no usable feature columns");
  ds.x.resize(n, static_cast<Index>(features.size()));
  for (std::size_t c = 0; c < features.size(); ++c) ds.x.col(static_cast<Index>(c)) = features[c];
  ds.reset_stats();
  ds.validate();
  spdlog::info("crimes: {} rows, X dimension {} ({} columns dropped for missing values)", n,
               ds.d_x(), dropped_missing);
  return ds;
}

}  // namespace cfair
