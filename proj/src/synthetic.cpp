// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "icmlp/cli.hpp"
#include "icmlp/errors.hpp"

namespace icmlp {

namespace {

void normalize(std::span<double> v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) return;
  for (double& x : v) x /= norm;
}

}  // namespace

Dataset make_synthetic(std::size_t n_samples, std::size_t dim, std::size_t n_classes,
                       double difficulty, std::uint64_t seed) {
  if (n_samples == 0 || dim == 0) throw ParameterError("synthetic data needs n >= 1 and dim >= 1");
  if (n_classes < 2) throw ParameterError("synthetic data needs at least 2 classes");
  if (!(difficulty >= 0.0) || !std::isfinite(difficulty)) {
    throw ParameterError("difficulty must be a finite non-negative number");
  }
  Rng rng(seed);
  Tensor centres(n_classes, dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto row = centres.row(c);
    for (double& v : row) v = rng.normal();
    normalize(row);
  }

  const double noise = difficulty / std::sqrt(static_cast<double>(dim));
  Dataset ds;
  ds.n_classes = n_classes;
  ds.features = Tensor(n_samples, dim);
  ds.labels.resize(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t label = i % n_classes;
    ds.labels[i] = static_cast<int>(label);
    auto row = ds.features.row(i);
    const auto centre = centres.row(label);
    for (std::size_t j = 0; j < dim; ++j) row[j] = centre[j] + noise * rng.normal();
    normalize(row);
  }
  return ds;
}

void gen_synthetic(std::size_t n_samples, std::size_t dim, std::size_t n_classes,
                   double difficulty, std::uint64_t seed, const std::filesystem::path& path) {
  write_csv(make_synthetic(n_samples, dim, n_classes, difficulty, seed), path);
}

}  // namespace icmlp
