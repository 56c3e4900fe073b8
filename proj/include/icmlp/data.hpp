// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "icmlp/tensor.hpp"

namespace icmlp {

/// N x D features with dense integer labels in [0, n_classes).
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t n_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

/// Throws ParameterError when labels, shapes, or values break the Dataset
/// invariants.
void validate(const Dataset& ds);

/// Rows `indices` of `ds`, in that order. n_classes is inherited.
Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

/// CSV: optional header (first field non-numeric), then `label,f0,...,fD-1`.
/// n_classes is inferred as max(label) + 1.
Dataset load_csv(const std::filesystem::path& path,
                 std::optional<std::size_t> expect_dim = std::nullopt);
/// Same parser over an in-memory string; `source` names it in errors.
Dataset parse_csv(const std::string& text, std::optional<std::size_t> expect_dim = std::nullopt,
                  const std::string& source = "<memory>");
/// Canonical form: header `label,f0,...`, shortest round-trip decimals, '\n'.
std::string format_csv(const Dataset& ds);
void write_csv(const Dataset& ds, const std::filesystem::path& path);

struct Split {
  Dataset train;
  Dataset held;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> held_indices;
};

/// Shuffled split with |held| = round(fraction * N), clamped to [1, N-1].
Split holdout_split(const Dataset& ds, double fraction, Rng& rng);

/// k near-equal folds per repeat, each repeat drawn from its own shuffle.
/// The first N mod k folds carry one extra sample.
struct FoldPlan {
  std::size_t k = 0;
  std::size_t repeats = 0;
  std::uint64_t seed = 0;
  /// folds[repeat][fold] -> sample indices
  std::vector<std::vector<std::vector<std::size_t>>> folds;
};

FoldPlan make_folds(std::size_t n_samples, std::size_t k, std::size_t repeats,
                    std::uint64_t seed);

struct Batch {
  Tensor x;
  std::vector<int> y;
};

/// One epoch of shuffled mini-batches. A trailing batch of a single sample is
/// dropped because batch norm needs two rows in Train mode.
std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size, Rng& rng);

}  // namespace icmlp
