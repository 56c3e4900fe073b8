// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icmlp/data.hpp"
#include "icmlp/model.hpp"
#include "icmlp/optim.hpp"

namespace icmlp {

struct TrainConfig {
  std::size_t n_residual = 4;
  std::size_t n_downsample = 4;
  std::size_t batch_size = 512;
  double initial_lr = 2e-2;
  double weight_decay = 4e-3;
  double lr_gamma = 6e-2;
  double dropout_p = 0.05;
  std::size_t patience = 5;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  AblationFlags ablation;
  std::optional<std::string> init_weights_path;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  ModelShape model_shape(std::size_t input_dim, std::size_t n_classes) const;
};

/// Tuned setting for the 2-class task: 4/4 blocks, batch 512, lr 2e-2,
/// weight decay 4e-3, gamma 6e-2.
TrainConfig preset_gender();
/// Tuned setting for the 8-class task: 2/2 blocks, batch 128, lr 2e-3,
/// weight decay 1e-4, gamma 4e-1.
TrainConfig preset_age();

struct Metrics {
  double loss = 0.0;
  double acc = 0.0;
};

/// Epochs are numbered from 1.
struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

/// Tracks the best validation loss; signals a stop once `patience`
/// consecutive epochs pass without a strictly lower value.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when `val_loss` is a new best.
  bool observe(double val_loss);
  bool should_stop() const { return since_best_ >= patience_; }
  std::size_t epochs_seen() const { return seen_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::size_t seen_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  double best_loss_ = 0.0;
};

struct RunResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::optional<Metrics> test;
  /// Weights from the best epoch, in Eval mode.
  IcMlpModel model;

  const EpochRecord& best_record() const { return history.at(best_epoch - 1); }
};

/// One shuffled pass: forward, cross-entropy, backward, AdamW step. Returns
/// the sample-weighted mean loss and accuracy of the Train-mode outputs.
/// Throws DivergenceError on a non-finite loss.
Metrics train_epoch(IcMlpModel& model, AdamW& optimizer, const Dataset& train,
                    std::size_t batch_size, Rng& rng);

/// Eval-mode mean cross-entropy and accuracy (argmax, ties to the lowest
/// class index). Leaves the model's mode untouched.
Metrics evaluate(const IcMlpModel& model, const Dataset& ds);

/// Trains with per-epoch exponential LR decay and early stopping, keeping
/// the weights of the epoch with the lowest validation loss.
RunResult fit(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const Dataset* test = nullptr);

struct RunSummary {
  std::string variant;
  std::size_t repeat = 0;
  std::size_t fold = 0;
  std::size_t best_epoch = 0;
  Metrics train;
  Metrics val;
  Metrics test;
  std::vector<EpochRecord> history;
};

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;  // population
};

MetricStats mean_std(const std::vector<double>& values);

struct Aggregate {
  std::string variant;
  std::size_t runs = 0;
  MetricStats train_loss, train_acc, val_loss, val_acc, test_loss, test_acc;
};

Aggregate aggregate_runs(const std::string& variant, const std::vector<RunSummary>& runs);

struct CvReport {
  std::string variant;
  FoldPlan plan;
  std::vector<RunSummary> runs;  // ordered by (repeat, fold)
  Aggregate aggregate;
};

/// k-fold CV repeated `repeats` times. In each run the held fold is the test
/// set, fold (test + 1) mod k validates, the rest trains. With k == 2 the
/// validation set is instead a 10% holdout of the training fold.
/// Runs may execute on `threads` workers; results do not depend on it.
CvReport cross_validate(const Dataset& ds, const TrainConfig& cfg, std::size_t k,
                        std::size_t repeats, std::size_t threads = 1);

/// The five architecture variants compared by the ablation study.
std::vector<AblationFlags> standard_variants();

/// cross_validate for each variant with identical seeds and fold plans.
std::vector<CvReport> ablation_sweep(const Dataset& ds, const TrainConfig& cfg,
                                     const std::vector<AblationFlags>& variants, std::size_t k,
                                     std::size_t repeats, std::size_t threads = 1);

struct LogRange {
  double lo;
  double hi;
};

/// Sampling space for random search. Residual and downsample counts are
/// drawn together since they must match.
struct SearchSpace {
  std::vector<std::size_t> block_counts{1, 2, 3, 4};
  std::vector<std::size_t> batch_sizes{128, 256, 512};
  LogRange initial_lr{1e-4, 1e-1};
  /// When non-empty, the learning rate is drawn uniformly from these values
  /// instead of from `initial_lr`.
  std::vector<double> initial_lr_values;
  LogRange weight_decay{1e-5, 1e-2};
  LogRange lr_gamma{1e-2, 1.0};
};

struct TrialRecord {
  std::size_t index = 0;
  TrainConfig cfg;
  bool ok = false;
  std::size_t best_epoch = 0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  std::string error;
};

struct SearchResult {
  TrainConfig best;
  std::size_t best_index = 0;
  std::vector<TrialRecord> trials;
};

/// Draws `n_trials` configs from `space` (other fields from `base`), fits
/// each on the training part of a held-out split and returns the one with
/// the lowest held-out cross-entropy. Throws SearchError if every trial fails.
SearchResult random_search(const Dataset& ds, const SearchSpace& space, const TrainConfig& base,
                           std::size_t n_trials, double holdout_fraction, std::uint64_t seed,
                           std::size_t threads = 1);

// Report formatting (CSV, '\n' line ends, shortest round-trip decimals).
std::string format_history_csv(const std::vector<EpochRecord>& history);
std::string format_runs_csv(const std::vector<CvReport>& reports);
std::string format_aggregate_csv(const std::vector<CvReport>& reports);
std::string format_trials_csv(const SearchResult& result);

}  // namespace icmlp
