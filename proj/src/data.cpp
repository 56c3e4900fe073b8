// SPDX-License-Identifier: Apache-2.0
#include "icmlp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>

#include "icmlp/errors.hpp"
#include "icmlp/format.hpp"

namespace icmlp {

void validate(const Dataset& ds) {
  if (ds.size() == 0 || ds.dim() == 0) throw ParameterError("dataset must be non-empty");
  if (ds.features.rows() != ds.labels.size()) {
    throw ParameterError("dataset has " + std::to_string(ds.features.rows()) + " rows but " +
                         std::to_string(ds.labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const int label = ds.labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= ds.n_classes) {
      throw ParameterError("label " + std::to_string(label) + " at row " + std::to_string(i) +
                           " outside [0, " + std::to_string(ds.n_classes) + ")");
    }
  }
  if (!ds.features.all_finite()) throw ParameterError("dataset contains non-finite features");
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.n_classes = ds.n_classes;
  out.features = Tensor(indices.size(), ds.dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= ds.size()) throw ParameterError("subset index " + std::to_string(src) + " out of range");
    std::copy_n(ds.features.row(src).begin(), ds.dim(), out.features.row(r).begin());
    out.labels.push_back(ds.labels[src]);
  }
  return out;
}

// ------------------------------------------------------------------ CSV

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

bool parse_int(std::string_view s, long long& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace

Dataset parse_csv(const std::string& text, std::optional<std::size_t> expect_dim,
                  const std::string& source) {
  auto fail = [&source](std::size_t line_no, const std::string& msg) -> ParseError {
    return ParseError(source + ":" + std::to_string(line_no) + ": " + msg);
  };

  std::vector<double> values;
  std::vector<int> labels;
  std::optional<std::size_t> dim = expect_dim;
  bool first_line = true;
  int max_label = -1;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;

    const auto fields = split_fields(line);
    if (first_line) {
      first_line = false;
      double probe;
      if (!parse_double(fields[0], probe)) continue;  // header line
    }
    if (fields.size() < 2) throw fail(line_no, "expected a label and at least one feature");
    const std::size_t row_dim = fields.size() - 1;
    if (!dim) dim = row_dim;
    if (row_dim != *dim) {
      throw fail(line_no, "expected " + std::to_string(*dim) + " features, found " +
                              std::to_string(row_dim));
    }
    long long label;
    if (!parse_int(fields[0], label)) {
      throw fail(line_no, "label '" + std::string(fields[0]) + "' is not an integer");
    }
    if (label < 0) throw fail(line_no, "negative label " + std::to_string(label));
    if (label > 1'000'000) throw fail(line_no, "label " + std::to_string(label) + " too large");
    for (std::size_t f = 1; f < fields.size(); ++f) {
      double v;
      if (!parse_double(fields[f], v) || !std::isfinite(v)) {
        throw fail(line_no, "feature " + std::to_string(f - 1) + " ('" + std::string(fields[f]) +
                                "') is not a finite number");
      }
      values.push_back(v);
    }
    labels.push_back(static_cast<int>(label));
    max_label = std::max(max_label, static_cast<int>(label));
  }
  if (labels.empty()) throw ParseError(source + ": no data rows");

  Dataset ds;
  ds.features = Tensor(labels.size(), *dim, std::move(values));
  ds.labels = std::move(labels);
  ds.n_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, std::optional<std::size_t> expect_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), expect_dim, path.string());
}

std::string format_csv(const Dataset& ds) {
  std::string out = "label";
  for (std::size_t f = 0; f < ds.dim(); ++f) out += ",f" + std::to_string(f);
  out += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.labels[i]);
    for (double v : ds.features.row(i)) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  write_text_file(path, format_csv(ds));
}

// ------------------------------------------------------ Splits and folds

Split holdout_split(const Dataset& ds, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ParameterError("holdout fraction must lie in (0, 1), got " + std::to_string(fraction));
  }
  const std::size_t n = ds.size();
  if (n < 2) throw ParameterError("holdout split needs at least 2 samples");
  auto held_count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  held_count = std::clamp<std::size_t>(held_count, 1, n - 1);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  Split split;
  split.held_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held_count));
  split.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(held_count), order.end());
  split.train = subset(ds, split.train_indices);
  split.held = subset(ds, split.held_indices);
  return split;
}

FoldPlan make_folds(std::size_t n_samples, std::size_t k, std::size_t repeats,
                    std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2, got " + std::to_string(k));
  if (repeats < 1) throw ConfigError("cross-validation needs at least one repeat");
  if (n_samples < k) {
    throw ConfigError("cannot split " + std::to_string(n_samples) + " samples into " +
                      std::to_string(k) + " folds");
  }
  FoldPlan plan;
  plan.k = k;
  plan.repeats = repeats;
  plan.seed = seed;
  const std::size_t base = n_samples / k;
  const std::size_t extra = n_samples % k;
  for (std::size_t r = 0; r < repeats; ++r) {
    Rng rng(derive_seed(seed, r));
    std::vector<std::size_t> order(n_samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> folds(k);
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const std::size_t size = base + (f < extra ? 1 : 0);
      folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                      order.begin() + static_cast<std::ptrdiff_t>(cursor + size));
      cursor += size;
    }
    plan.folds.push_back(std::move(folds));
  }
  return plan;
}

std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size, Rng& rng) {
  if (batch_size < 2) {
    throw ConfigError("batch_size must be at least 2 for batch norm, got " +
                      std::to_string(batch_size));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    if (end - start < 2) break;
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
    Dataset part = subset(ds, idx);
    batches.push_back({std::move(part.features), std::move(part.labels)});
  }
  return batches;
}

}  // namespace icmlp
