#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hvcm/binary_io.hpp"
#include "hvcm/error.hpp"

namespace hvcm {

/// Label reserved for unlabeled / out-of-distribution rows.
inline constexpr std::int32_t kOodLabel = -1;

/// Labeled feature vectors, row-major 32-bit payload.
struct FeatureDataset {
  std::string name;
  std::uint32_t n = 0;
  std::uint32_t dim = 0;
  std::uint32_t c_max = 0;
  bool has_labels = false;
  std::vector<std::int32_t> labels;  // empty when !has_labels
  std::vector<float> data;           // n * dim

  std::span<const float> row(std::size_t i) const {
    return {data.data() + i * dim, dim};
  }
  std::int32_t label(std::size_t i) const {
    return has_labels ? labels[i] : kOodLabel;
  }
};

/// Payload and header equality at the bit level (NaN payloads and signed
/// zeros compare by representation). The name tag is ignored.
inline bool bitwise_equal(const FeatureDataset& a, const FeatureDataset& b) {
  return a.n == b.n && a.dim == b.dim && a.c_max == b.c_max &&
         a.has_labels == b.has_labels && a.labels == b.labels &&
         a.data.size() == b.data.size() &&
         (a.data.empty() ||
          std::memcmp(a.data.data(), b.data.data(),
                      a.data.size() * sizeof(float)) == 0);
}

struct ValidationReport {
  std::vector<std::size_t> nonfinite_rows;
  std::vector<std::size_t> out_of_range_rows;
  std::map<std::int32_t, std::size_t> label_histogram;  // includes -1
  std::map<std::int32_t, std::size_t> class_counts;     // N_c, labels >= 0
  std::size_t ood_count = 0;
  bool shape_ok = true;

  bool clean() const {
    return shape_ok && nonfinite_rows.empty() && out_of_range_rows.empty();
  }
};

inline ValidationReport validate(const FeatureDataset& ds) {
  ValidationReport report;
  report.shape_ok =
      ds.data.size() == std::size_t{ds.n} * ds.dim &&
      (!ds.has_labels || ds.labels.size() == ds.n) &&
      (ds.has_labels || ds.labels.empty());
  if (!report.shape_ok) return report;

  for (std::size_t i = 0; i < ds.n; ++i) {
    auto r = ds.row(i);
    if (!std::all_of(r.begin(), r.end(), [](float v) { return std::isfinite(v); })) {
      report.nonfinite_rows.push_back(i);
    }
    if (!ds.has_labels) continue;
    const auto l = ds.labels[i];
    if (l < kOodLabel || l >= static_cast<std::int64_t>(ds.c_max)) {
      report.out_of_range_rows.push_back(i);
      continue;
    }
    ++report.label_histogram[l];
    if (l == kOodLabel) {
      ++report.ood_count;
    } else {
      ++report.class_counts[l];
    }
  }
  return report;
}

namespace detail {

inline constexpr char kFeatureMagic[4] = {'H', 'V', 'C', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const FeatureDataset& ds) {
  std::string out;
  out.reserve(21 + ds.labels.size() * 4 + ds.data.size() * 4);
  out.append(kFeatureMagic, 4);
  io::put<std::uint32_t>(out, kFeatureVersion);
  io::put<std::uint32_t>(out, ds.n);
  io::put<std::uint32_t>(out, ds.dim);
  io::put<std::uint32_t>(out, ds.c_max);
  io::put<std::uint8_t>(out, ds.has_labels ? 1 : 0);
  for (auto l : ds.labels) io::put<std::int32_t>(out, l);
  for (auto v : ds.data) io::put<float>(out, v);
  return out;
}

inline FeatureDataset decode_features(std::string_view bytes) {
  io::Reader in(bytes);
  if (in.remaining() < 4 || std::memcmp(in.take(4).data(), kFeatureMagic, 4) != 0) {
    fail("bad magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kFeatureVersion) {
    fail("unsupported feature file version " + std::to_string(version));
  }
  FeatureDataset ds;
  ds.n = in.get<std::uint32_t>();
  ds.dim = in.get<std::uint32_t>();
  ds.c_max = in.get<std::uint32_t>();
  const auto flag = in.get<std::uint8_t>();
  if (flag > 1) fail("bad has_labels flag");
  ds.has_labels = flag == 1;

  const std::uint64_t expected =
      (ds.has_labels ? std::uint64_t{ds.n} * 4 : 0) + std::uint64_t{ds.n} * ds.dim * 4;
  if (in.remaining() < expected) fail("truncated payload");
  if (in.remaining() > expected) fail("trailing bytes after payload");

  if (ds.has_labels) {
    ds.labels.resize(ds.n);
    for (auto& l : ds.labels) {
      l = in.get<std::int32_t>();
      if (l < kOodLabel || l >= static_cast<std::int64_t>(ds.c_max)) {
        fail("label out of range: " + std::to_string(l));
      }
    }
  }
  ds.data.resize(std::size_t{ds.n} * ds.dim);
  for (auto& v : ds.data) v = in.get<float>();
  return ds;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
      field.remove_suffix(1);
    }
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view text, T& value) {
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

// The first line is a header iff any field fails to parse as a number. A
// header whose first column is `label` marks the labeled layout.
inline FeatureDataset decode_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(line);
  }
  FeatureDataset ds;
  if (lines.empty()) return ds;

  std::size_t first = 0;
  auto header = split_fields(lines.front());
  double probe = 0;
  const bool has_header = std::any_of(header.begin(), header.end(), [&](auto f) {
    return !parse_number(f, probe);
  });
  if (has_header) {
    ds.has_labels = header.front() == "label";
    first = 1;
  }
  const std::size_t width = split_fields(lines[first < lines.size() ? first : 0]).size();
  if (has_header && header.size() != width && first < lines.size()) {
    fail("CSV row width mismatch at line 2");
  }
  const std::size_t label_cols = ds.has_labels ? 1 : 0;
  if (width <= label_cols) fail("CSV has no feature columns");
  ds.dim = static_cast<std::uint32_t>(width - label_cols);

  std::int32_t max_label = kOodLabel;
  for (std::size_t li = first; li < lines.size(); ++li) {
    auto fields = split_fields(lines[li]);
    if (fields.size() != width) {
      fail("CSV row width mismatch at line " + std::to_string(li + 1));
    }
    if (ds.has_labels) {
      std::int32_t l = 0;
      if (!parse_number(fields[0], l)) fail("bad label at line " + std::to_string(li + 1));
      if (l < kOodLabel) fail("label out of range: " + std::to_string(l));
      max_label = std::max(max_label, l);
      ds.labels.push_back(l);
    }
    for (std::size_t j = label_cols; j < width; ++j) {
      float v = 0;
      if (!parse_number(fields[j], v)) fail("bad number at line " + std::to_string(li + 1));
      ds.data.push_back(v);
    }
    ++ds.n;
  }
  ds.c_max = static_cast<std::uint32_t>(max_label + 1);
  return ds;
}

}  // namespace detail

enum class FeatureFormat { binary, csv };

inline FeatureFormat format_for(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? FeatureFormat::csv : FeatureFormat::binary;
}

inline FeatureDataset load_features(const std::filesystem::path& path, FeatureFormat format) {
  const auto bytes = io::read_file(path);
  auto ds = format == FeatureFormat::csv ? detail::decode_csv(bytes)
                                         : detail::decode_features(bytes);
  ds.name = path.stem().string();
  return ds;
}

inline FeatureDataset load_features(const std::filesystem::path& path) {
  return load_features(path, format_for(path));
}

inline void save_features(const FeatureDataset& ds, const std::filesystem::path& path) {
  const auto report = validate(ds);
  if (!report.shape_ok) fail("dataset shape inconsistent with header");
  if (!report.nonfinite_rows.empty()) {
    fail("refusing to write non-finite values (row " +
         std::to_string(report.nonfinite_rows.front()) + ")");
  }
  if (!report.out_of_range_rows.empty()) fail("label out of range");
  io::write_file_atomic(path, detail::encode_features(ds));
}

/// Copies the given rows, in order.
inline FeatureDataset select_rows(const FeatureDataset& ds, std::span<const std::size_t> rows) {
  FeatureDataset out;
  out.name = ds.name;
  out.dim = ds.dim;
  out.c_max = ds.c_max;
  out.has_labels = ds.has_labels;
  out.n = static_cast<std::uint32_t>(rows.size());
  out.data.reserve(rows.size() * ds.dim);
  for (auto i : rows) {
    auto r = ds.row(i);
    out.data.insert(out.data.end(), r.begin(), r.end());
    if (ds.has_labels) out.labels.push_back(ds.labels[i]);
  }
  return out;
}

/// Stratified split: within every label (including -1) a seeded shuffle puts
/// round(fraction * count) rows into the first part. Both parts keep the
/// original row order.
inline std::pair<FeatureDataset, FeatureDataset> split(const FeatureDataset& ds,
                                                       double fraction,
                                                       std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) fail("split fraction must lie in (0,1)");
  if (ds.n < 2) fail("split needs at least 2 rows");

  std::map<std::int32_t, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < ds.n; ++i) strata[ds.label(i)].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> first, second;
  for (auto& [label, rows] : strata) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto take = static_cast<std::size_t>(std::llround(fraction * rows.size()));
    first.insert(first.end(), rows.begin(), rows.begin() + take);
    second.insert(second.end(), rows.begin() + take, rows.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {select_rows(ds, first), select_rows(ds, second)};
}

/// Row indices grouped by class label (labels >= 0 only).
inline std::vector<std::vector<std::size_t>> rows_by_class(const FeatureDataset& ds) {
  std::vector<std::vector<std::size_t>> out(ds.c_max);
  for (std::size_t i = 0; i < ds.n; ++i) {
    const auto l = ds.label(i);
    if (l >= 0) out[static_cast<std::size_t>(l)].push_back(i);
  }
  return out;
}

}  // namespace hvcm
