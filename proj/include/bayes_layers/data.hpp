#pragma once

// CSV datasets and flat `key = value` config files.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bayes_layers/tensor.hpp"

namespace bayes_layers {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Per-column affine standardization, kept so predictions can be mapped back.
struct Standardization {
  std::vector<double> mean, stddev;

  Tensor apply(const Tensor& x) const { return div(sub(x, Tensor::vector(mean)), Tensor::vector(stddev)); }
  Tensor invert(const Tensor& z) const { return add(mul(z, Tensor::vector(stddev)), Tensor::vector(mean)); }

  /// Population statistics of each column of a [n, c] tensor. Constant
  /// columns get stddev 1 so they map to 0 instead of NaN.
  static Standardization fit(const Tensor& x) {
    const std::size_t n = x.dim(0), c = x.dim(1);
    Standardization s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) s.mean[j] += x[i * c + j];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) s.stddev[j] += std::pow(x[i * c + j] - s.mean[j], 2);
    for (auto& v : s.stddev) {
      v = std::sqrt(v / static_cast<double>(n));
      if (v == 0.0) v = 1.0;
    }
    return s;
  }
};

struct Dataset {
  Tensor features;  // [n, d]
  Tensor targets;   // [n, k]
  std::optional<Standardization> feature_norm, target_norm;

  std::size_t size() const { return features.dim(0); }
};

/// Reads a headered CSV. Fields are comma separated without quoting.
inline Dataset load_csv(std::istream& in, const std::vector<std::string>& feature_cols,
                        const std::vector<std::string>& target_cols, bool normalize = false,
                        const std::string& source = "csv") {
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return source + ":" + std::to_string(line_no) + ": "; };
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) fail(ErrorKind::kParse, source + ": missing header line");
  const auto header = detail::split_csv_line(line);

  auto locate = [&](const std::vector<std::string>& names) {
    std::vector<std::size_t> idx;
    for (const auto& name : names) {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) {
        std::string available;
        for (const auto& h : header) available += (available.empty() ? "" : ", ") + h;
        fail(ErrorKind::kParse, source + ": no column '" + name + "'; available columns: " + available);
      }
      idx.push_back(static_cast<std::size_t>(it - header.begin()));
    }
    return idx;
  };
  if (feature_cols.empty()) fail(ErrorKind::kInvalidArgument, "load_csv needs at least one feature column");
  const auto fi = locate(feature_cols);
  const auto ti = locate(target_cols);

  std::vector<double> xs, ys;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      fail(ErrorKind::kParse, where() + "expected " + std::to_string(header.size()) + " fields, found " +
                                  std::to_string(fields.size()));
    }
    auto take = [&](const std::vector<std::size_t>& cols, std::vector<double>& dst) {
      for (std::size_t c : cols) {
        const auto v = detail::parse_double(fields[c]);
        if (!v) fail(ErrorKind::kParse, where() + "column '" + header[c] + "': '" + fields[c] + "' is not numeric");
        dst.push_back(*v);
      }
    };
    take(fi, xs);
    take(ti, ys);
    ++rows;
  }
  if (rows == 0) fail(ErrorKind::kParse, source + ": no data rows");

  Dataset d{Tensor({rows, fi.size()}, std::move(xs)), Tensor({rows, ti.size()}, std::move(ys)), {}, {}};
  if (normalize) {
    d.feature_norm = Standardization::fit(d.features);
    d.features = d.feature_norm->apply(d.features);
    if (!ti.empty()) {
      d.target_norm = Standardization::fit(d.targets);
      d.targets = d.target_norm->apply(d.targets);
    }
  }
  return d;
}

inline Dataset load_csv(const std::string& path, const std::vector<std::string>& feature_cols,
                        const std::vector<std::string>& target_cols, bool normalize = false) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "'");
  return load_csv(in, feature_cols, target_cols, normalize, path);
}

/// Flat text config: `key = value` per line, `#` starts a comment.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in, const std::string& source = "config") {
    Config c;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      const std::string body = detail::trim(std::string_view(line).substr(0, hash));
      if (body.empty()) continue;
      const auto eq = body.find('=');
      const std::string key = eq == std::string::npos ? "" : detail::trim(std::string_view(body).substr(0, eq));
      if (key.empty()) {
        fail(ErrorKind::kParse, source + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + body + "'");
      }
      c.values_[key] = detail::trim(std::string_view(body).substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::kIo, "cannot open config '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto v = detail::parse_double(it->second);
    if (!v) fail(ErrorKind::kParse, "config key '" + key + "': '" + it->second + "' is not a number");
    return *v;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::uint64_t v = 0;
    const std::string& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      fail(ErrorKind::kParse, "config key '" + key + "': '" + s + "' is not a non-negative integer");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    fail(ErrorKind::kParse, "config key '" + key + "': expected true or false, got '" + it->second + "'");
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace bayes_layers
