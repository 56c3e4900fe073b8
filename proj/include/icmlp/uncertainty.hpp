// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icmlp/model.hpp"
#include "icmlp/tensor.hpp"

namespace icmlp {

/// Result of Monte-Carlo dropout inference over a batch.
struct PredictiveSummary {
  Tensor mean_probs;             // B x C, average of the per-pass softmaxes
  std::vector<double> entropy;   // B, nats, of mean_probs rows
  std::size_t passes = 0;
  std::vector<Tensor> per_pass;  // T x (B x C) when requested
};

struct McOptions {
  std::size_t passes = 512;
  std::size_t threads = 1;
  bool keep_per_pass = false;
  /// Run even when the model has no dropout layers.
  bool force = false;
};

/// Averages `passes` stochastic forwards with dropout active and batch norm
/// on running statistics. Pass t draws its masks from its own generator
/// seeded derive_seed(base, t), where base is one draw from `rng`, so the
/// masks do not depend on the thread count.
PredictiveSummary mc_dropout_predict(const IcMlpModel& model, const Tensor& x,
                                     const McOptions& options, Rng& rng);

/// -sum p ln p with 0 ln 0 = 0. Throws DistributionError for negative
/// entries or a sum more than 1e-6 away from 1.
double entropy(std::span<const double> probs);

enum class RankOrder { Lowest, Highest };

/// Indices of the top_n lowest (or highest) entropies; stable, so ties keep
/// index order.
std::vector<std::size_t> rank_by_entropy(std::span<const double> entropies, std::size_t top_n,
                                         RankOrder order);

/// CSV: sample_index,predicted_class,entropy,p_0..p_{C-1}
std::string format_uncertainty_csv(const PredictiveSummary& summary);

}  // namespace icmlp
