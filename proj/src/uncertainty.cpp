// SPDX-License-Identifier: Apache-2.0
#include "icmlp/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icmlp/errors.hpp"
#include "icmlp/format.hpp"
#include "icmlp/parallel.hpp"

namespace icmlp {

PredictiveSummary mc_dropout_predict(const IcMlpModel& model, const Tensor& x,
                                     const McOptions& options, Rng& rng) {
  if (options.passes == 0) throw ParameterError("MC dropout needs at least one forward pass");
  if (!model.ablation().uses_dropout() && !options.force) {
    throw DeterministicModelError(
        "deterministic model, entropy degenerate: variant '" + model.ablation().name() +
        "' has no dropout layers (pass force to run anyway)");
  }
  const std::uint64_t base = rng.next_u64();
  const std::size_t passes = options.passes;
  const std::size_t workers = std::min(std::max<std::size_t>(options.threads, 1), passes);

  // Each worker owns a contiguous range of passes and its own accumulator;
  // partial sums are combined in worker order.
  std::vector<Tensor> partial(workers, Tensor(x.rows(), model.n_classes()));
  std::vector<Tensor> per_pass(options.keep_per_pass ? passes : 0);
  auto errors = parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t begin = passes * w / workers;
    const std::size_t end = passes * (w + 1) / workers;
    for (std::size_t t = begin; t < end; ++t) {
      Rng pass_rng(derive_seed(base, t));
      Tensor probs = softmax(model.sample_mc(x, pass_rng));
      for (std::size_t i = 0; i < probs.size(); ++i) partial[w][i] += probs[i];
      if (options.keep_per_pass) per_pass[t] = std::move(probs);
    }
  });
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  PredictiveSummary out;
  out.passes = passes;
  out.mean_probs = Tensor(x.rows(), model.n_classes());
  for (const Tensor& p : partial) {
    for (std::size_t i = 0; i < p.size(); ++i) out.mean_probs[i] += p[i];
  }
  const double inv = 1.0 / static_cast<double>(passes);
  for (double& v : out.mean_probs.data()) v *= inv;
  out.entropy.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out.entropy.push_back(entropy(out.mean_probs.row(i)));
  out.per_pass = std::move(per_pass);
  return out;
}

double entropy(std::span<const double> probs) {
  double sum = 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw DistributionError("entropy: negative or NaN probability");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw DistributionError("entropy: probabilities sum to " + format_double(sum) + ", not 1");
  }
  // Rounding can leave -0.0 or a hair below zero for one-hot inputs.
  return std::max(h, 0.0);
}

std::vector<std::size_t> rank_by_entropy(std::span<const double> entropies, std::size_t top_n,
                                         RankOrder order) {
  if (top_n > entropies.size()) {
    throw ParameterError("rank_by_entropy: top_n " + std::to_string(top_n) + " exceeds " +
                         std::to_string(entropies.size()) + " samples");
  }
  std::vector<std::size_t> idx(entropies.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (order == RankOrder::Lowest) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return entropies[a] < entropies[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return entropies[a] > entropies[b]; });
  }
  idx.resize(top_n);
  return idx;
}

std::string format_uncertainty_csv(const PredictiveSummary& summary) {
  const std::size_t classes = summary.mean_probs.cols();
  std::string out = "sample_index,predicted_class,entropy";
  for (std::size_t c = 0; c < classes; ++c) out += ",p_" + std::to_string(c);
  out += '\n';
  for (std::size_t i = 0; i < summary.mean_probs.rows(); ++i) {
    const auto row = summary.mean_probs.row(i);
    std::size_t pred = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[pred]) pred = c;
    }
    out += std::to_string(i) + ',' + std::to_string(pred) + ',' + format_double(summary.entropy[i]);
    for (double p : row) out += ',' + format_double(p);
    out += '\n';
  }
  return out;
}

}  // namespace icmlp
