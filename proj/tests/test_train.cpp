// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "icmlp/errors.hpp"
#include "icmlp/train.hpp"
#include "test_support.hpp"

namespace icmlp {
namespace {

using testing::random_tensor;

// Labels depend only on the sign of feature 0.
Dataset threshold_dataset(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.n_classes = 2;
  ds.features = random_tensor(rng, n, dim);
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(ds.features(i, 0) > 0.0 ? 1 : 0);
  return ds;
}

Dataset random_label_dataset(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.n_classes = 2;
  ds.features = random_tensor(rng, n, dim);
  // Unit-norm rows, the scale of the embeddings the model is built for.
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) norm += ds.features(i, j) * ds.features(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) ds.features(i, j) /= norm;
    ds.labels.push_back(static_cast<int>(rng.uniform_index(2)));
  }
  return ds;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.n_residual = 1;
  cfg.n_downsample = 1;
  cfg.batch_size = 32;
  cfg.initial_lr = 1e-2;
  cfg.weight_decay = 1e-4;
  cfg.lr_gamma = 0.9;
  cfg.max_epochs = 8;
  return cfg;
}

IcMlpModel small_model(std::size_t dim, double p, std::uint64_t seed) {
  Rng rng(seed);
  return build_model({.input_dim = dim, .n_classes = 2, .n_residual = 1, .n_downsample = 1,
                      .dropout_p = p},
                     rng);
}

// -------------------------------------------------------- early stopping

TEST(EarlyStopping, StopsFiveEpochsAfterBest) {
  EarlyStopping stopper(5);
  const std::vector<double> losses{1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95};
  std::size_t stopped_after = 0;
  for (double l : losses) {
    stopper.observe(l);
    if (stopper.should_stop()) {
      stopped_after = stopper.epochs_seen();
      break;
    }
  }
  EXPECT_EQ(stopped_after, 7u);
  EXPECT_EQ(stopper.best_epoch(), 2u);
  EXPECT_EQ(stopper.best_loss(), 0.9);
}

TEST(EarlyStopping, EqualLossIsNotImprovement) {
  EarlyStopping stopper(2);
  EXPECT_TRUE(stopper.observe(0.5));
  EXPECT_FALSE(stopper.observe(0.5));
  EXPECT_FALSE(stopper.observe(0.5));
  EXPECT_TRUE(stopper.should_stop());
  EXPECT_EQ(stopper.best_epoch(), 1u);
}

// ----------------------------------------------------------- train_epoch

TEST(TrainEpoch, LearnableTaskLossDecreasesOverFirstEpochs) {
  const Dataset ds = threshold_dataset(256, 8, 1);
  IcMlpModel model = small_model(8, 0.05, 2);
  AdamW opt({.lr = 1e-2, .weight_decay = 1e-4});
  Rng rng(3);
  std::vector<double> losses;
  for (int e = 0; e < 3; ++e) losses.push_back(train_epoch(model, opt, ds, 32, rng).loss);
  EXPECT_LT(losses[1], losses[0]);
  EXPECT_LT(losses[2], losses[1]);
}

TEST(TrainEpoch, ZeroLearningRateFreezesParameters) {
  const Dataset ds = threshold_dataset(64, 8, 4);
  IcMlpModel model = small_model(8, 0.0, 5);
  std::vector<Tensor> before;
  for (const ParamRef& p : model.parameters()) before.push_back(*p.value);
  AdamW opt({.lr = 0.0, .weight_decay = 0.01});
  Rng rng(6);
  std::vector<double> losses;
  for (int e = 0; e < 3; ++e) losses.push_back(train_epoch(model, opt, ds, 64, rng).loss);
  const auto after = model.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(*after[i].value, before[i]);
  // One full batch per epoch; only the summation order can change.
  EXPECT_NEAR(losses[1], losses[0], 1e-12);
  EXPECT_NEAR(losses[2], losses[0], 1e-12);
}

TEST(TrainEpoch, RandomLabelsStartNearChance) {
  // A fresh Kaiming head puts the logit gap at std ~2 (loss ~1.1 on the first
  // batch); at the preset learning rate the epoch mean settles onto chance.
  const Dataset ds = random_label_dataset(2048, 16, 7);
  IcMlpModel model = small_model(16, 0.05, 8);
  AdamW opt({.lr = 2e-2});
  Rng rng(9);
  EXPECT_NEAR(train_epoch(model, opt, ds, 64, rng).loss, std::log(2.0), 0.1);
  EXPECT_NEAR(train_epoch(model, opt, ds, 64, rng).loss, std::log(2.0), 0.05);
}

TEST(TrainEpoch, DivergenceNamesTheBatch) {
  const Dataset ds = threshold_dataset(64, 8, 10);
  IcMlpModel model = small_model(8, 0.0, 11);
  model.head.bias()(0, 0) = std::numeric_limits<double>::infinity();
  AdamW opt({.lr = 1e-3});
  Rng rng(12);
  try {
    train_epoch(model, opt, ds, 16, rng);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

// -------------------------------------------------------------- evaluate

TEST(Evaluate, SaturatedLogitsGiveZeroLossFullAccuracy) {
  Dataset ds = threshold_dataset(20, 8, 13);
  for (int& y : ds.labels) y = 0;
  IcMlpModel model = build_model_skeleton({.input_dim = 8, .n_classes = 2, .n_residual = 1,
                                           .n_downsample = 1});
  model.head.bias() = Tensor{{500, -500}};
  const Metrics m = evaluate(model, ds);
  EXPECT_NEAR(m.loss, 0.0, 1e-12);
  EXPECT_EQ(m.acc, 1.0);
}

TEST(Evaluate, ZeroLogitsTieToClassZero) {
  const Dataset ds = threshold_dataset(40, 8, 14);
  const IcMlpModel model = build_model_skeleton(
      {.input_dim = 8, .n_classes = 2, .n_residual = 1, .n_downsample = 1});
  const Metrics m = evaluate(model, ds);
  EXPECT_NEAR(m.loss, std::log(2.0), 1e-15);
  const double zeros = static_cast<double>(std::count(ds.labels.begin(), ds.labels.end(), 0));
  EXPECT_EQ(m.acc, zeros / 40.0);
}

TEST(Evaluate, RepeatableBitwise) {
  const Dataset ds = threshold_dataset(30, 8, 15);
  const IcMlpModel model = small_model(8, 0.05, 16);
  const Metrics a = evaluate(model, ds);
  const Metrics b = evaluate(model, ds);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.acc, b.acc);
}

// ------------------------------------------------------------------- fit

TEST(Fit, MaxEpochsOneGivesOneRecord) {
  const Dataset ds = threshold_dataset(128, 8, 17);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 1;
  const RunResult r = fit(ds, ds, cfg);
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_EQ(r.history[0].lr, cfg.initial_lr);
}

TEST(Fit, SameSeedSameHistory) {
  const Dataset ds = threshold_dataset(128, 8, 18);
  const TrainConfig cfg = small_config();
  const RunResult a = fit(ds, ds, cfg);
  const RunResult b = fit(ds, ds, cfg);
  EXPECT_EQ(format_history_csv(a.history), format_history_csv(b.history));
  EXPECT_EQ(serialize_model(a.model), serialize_model(b.model));
}

TEST(Fit, KeepsBestEpochWeights) {
  const Dataset train = threshold_dataset(128, 8, 19);
  const Dataset val = threshold_dataset(64, 8, 20);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 12;
  cfg.patience = 3;
  const RunResult r = fit(train, val, cfg);
  EXPECT_EQ(evaluate(r.model, val).loss, r.best_val_loss);
  EXPECT_EQ(r.best_record().val_loss, r.best_val_loss);
  for (const auto& rec : r.history) EXPECT_GE(rec.val_loss, r.best_val_loss);
}

TEST(Fit, LearningRateFollowsSchedule) {
  const Dataset ds = threshold_dataset(64, 8, 21);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 3;
  cfg.patience = 10;
  const RunResult r = fit(ds, ds, cfg);
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& rec : r.history) {
    EXPECT_DOUBLE_EQ(rec.lr, cfg.initial_lr * std::pow(cfg.lr_gamma, rec.epoch - 1.0));
  }
}

TEST(Fit, WarmStartWithZeroLearningRateKeepsWeights) {
  const Dataset ds = threshold_dataset(64, 8, 22);
  TrainConfig cfg = small_config();
  cfg.dropout_p = 0.0;
  const IcMlpModel seed_model = small_model(8, 0.0, 23);
  const auto path = testing::temp_dir("train") / "warm.bin";
  save_model(seed_model, path);
  cfg.init_weights_path = path.string();
  cfg.initial_lr = 0.0;
  cfg.max_epochs = 2;
  const RunResult r = fit(ds, ds, cfg);
  IcMlpModel trained = r.model;
  IcMlpModel original = seed_model;
  const auto got = trained.parameters();
  const auto want = original.parameters();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(*got[i].value, *want[i].value);
}

TEST(Fit, InvalidConfigRejected) {
  const Dataset ds = threshold_dataset(16, 8, 24);
  TrainConfig cfg = small_config();
  cfg.n_downsample = 2;
  EXPECT_THROW(fit(ds, ds, cfg), ConfigError);
  cfg = small_config();
  cfg.lr_gamma = 0.0;
  EXPECT_THROW(fit(ds, ds, cfg), ConfigError);
}

TEST(Presets, TunedValues) {
  const TrainConfig g = preset_gender();
  EXPECT_EQ(g.n_residual, 4u);
  EXPECT_EQ(g.n_downsample, 4u);
  EXPECT_EQ(g.batch_size, 512u);
  EXPECT_EQ(g.initial_lr, 2e-2);
  EXPECT_EQ(g.weight_decay, 4e-3);
  EXPECT_EQ(g.lr_gamma, 6e-2);
  EXPECT_EQ(g.dropout_p, 0.05);
  EXPECT_EQ(g.patience, 5u);
  const TrainConfig a = preset_age();
  EXPECT_EQ(a.n_residual, 2u);
  EXPECT_EQ(a.n_downsample, 2u);
  EXPECT_EQ(a.batch_size, 128u);
  EXPECT_EQ(a.initial_lr, 2e-3);
  EXPECT_EQ(a.weight_decay, 1e-4);
  EXPECT_EQ(a.lr_gamma, 4e-1);
}

// ------------------------------------------------------ cross-validation

TrainConfig cv_config() {
  TrainConfig cfg = small_config();
  cfg.max_epochs = 2;
  cfg.batch_size = 16;
  return cfg;
}

TEST(CrossValidate, FiveByFiveGivesTwentyFiveRuns) {
  const Dataset ds = threshold_dataset(100, 8, 25);
  const CvReport rep = cross_validate(ds, cv_config(), 5, 5);
  ASSERT_EQ(rep.runs.size(), 25u);
  EXPECT_EQ(rep.aggregate.runs, 25u);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(rep.runs[i].repeat, i / 5);
    EXPECT_EQ(rep.runs[i].fold, i % 5);
  }
}

TEST(CrossValidate, TwoFoldAggregateIsMeanOfRuns) {
  const Dataset ds = threshold_dataset(60, 8, 26);
  const CvReport rep = cross_validate(ds, cv_config(), 2, 1);
  ASSERT_EQ(rep.runs.size(), 2u);
  EXPECT_DOUBLE_EQ(rep.aggregate.test_loss.mean,
                   (rep.runs[0].test.loss + rep.runs[1].test.loss) / 2.0);
  EXPECT_DOUBLE_EQ(rep.aggregate.val_acc.mean, (rep.runs[0].val.acc + rep.runs[1].val.acc) / 2.0);
  EXPECT_DOUBLE_EQ(rep.aggregate.test_loss.std,
                   std::abs(rep.runs[0].test.loss - rep.runs[1].test.loss) / 2.0);
}

TEST(CrossValidate, IdenticalRunsHaveZeroSpread) {
  RunSummary s;
  s.train = {0.3, 0.9};
  s.val = {0.4, 0.8};
  s.test = {0.5, 0.7};
  const Aggregate a = aggregate_runs("full", {s, s, s});
  EXPECT_EQ(a.test_loss.mean, 0.5);
  EXPECT_EQ(a.test_loss.std, 0.0);
  EXPECT_EQ(a.val_acc.std, 0.0);
}

TEST(CrossValidate, ThreadCountDoesNotChangeResults) {
  const Dataset ds = threshold_dataset(60, 8, 27);
  const CvReport one = cross_validate(ds, cv_config(), 3, 1, 1);
  const CvReport three = cross_validate(ds, cv_config(), 3, 1, 3);
  EXPECT_EQ(format_runs_csv({one}), format_runs_csv({three}));
}

TEST(Ablation, FiveVariantsShareFolds) {
  const Dataset ds = threshold_dataset(60, 8, 28);
  const auto reports = ablation_sweep(ds, cv_config(), standard_variants(), 3, 1);
  ASSERT_EQ(reports.size(), 5u);
  EXPECT_EQ(reports[0].variant, "full");
  EXPECT_EQ(reports[1].variant, "no_dropout");
  EXPECT_EQ(reports[0].plan.folds, reports[1].plan.folds);
  const std::string agg = format_aggregate_csv(reports);
  EXPECT_EQ(std::count(agg.begin(), agg.end(), '\n'), 6);
  const std::string runs = format_runs_csv(reports);
  EXPECT_EQ(std::count(runs.begin(), runs.end(), '\n'), 16);
}

// ---------------------------------------------------------- random search

TEST(RandomSearch, SingleTrialIsReturned) {
  const Dataset ds = threshold_dataset(80, 8, 29);
  TrainConfig base = small_config();
  base.max_epochs = 2;
  SearchSpace space;
  space.block_counts = {1};
  space.batch_sizes = {16, 32};
  const SearchResult r = random_search(ds, space, base, 1, 0.2, 5);
  ASSERT_EQ(r.trials.size(), 1u);
  EXPECT_EQ(r.best_index, 0u);
  EXPECT_EQ(r.best.initial_lr, r.trials[0].cfg.initial_lr);
  EXPECT_GE(r.best.initial_lr, 1e-4);
  EXPECT_LE(r.best.initial_lr, 1e-1);
}

TEST(RandomSearch, CollapsedSpaceReturnsThePoint) {
  const Dataset ds = threshold_dataset(80, 8, 30);
  TrainConfig base = small_config();
  base.max_epochs = 2;
  SearchSpace space{.block_counts = {1},
                    .batch_sizes = {16},
                    .initial_lr = {3e-3, 3e-3},
                    .weight_decay = {1e-4, 1e-4},
                    .lr_gamma = {0.5, 0.5}};
  const SearchResult r = random_search(ds, space, base, 3, 0.2, 6);
  EXPECT_EQ(r.best.n_residual, 1u);
  EXPECT_EQ(r.best.batch_size, 16u);
  EXPECT_EQ(r.best.initial_lr, 3e-3);
  EXPECT_EQ(r.best.weight_decay, 1e-4);
  EXPECT_EQ(r.best.lr_gamma, 0.5);
}

TEST(RandomSearch, LearnableConfigBeatsFrozenOne) {
  const Dataset ds = threshold_dataset(200, 8, 31);
  TrainConfig base = small_config();
  base.max_epochs = 6;
  SearchSpace space{.block_counts = {1},
                    .batch_sizes = {32},
                    .initial_lr = {1e-2, 1e-2},
                    .initial_lr_values = {0.0, 1e-2},
                    .weight_decay = {1e-4, 1e-4},
                    .lr_gamma = {1.0, 1.0}};
  const SearchResult r = random_search(ds, space, base, 6, 0.2, 7);
  bool saw_zero = false;
  for (const auto& t : r.trials) saw_zero |= t.cfg.initial_lr == 0.0;
  ASSERT_TRUE(saw_zero);
  EXPECT_EQ(r.best.initial_lr, 1e-2);
}

TEST(RandomSearch, AllTrialsFailingIsSearchError) {
  const Dataset ds = threshold_dataset(40, 8, 32);
  SearchSpace space;
  space.block_counts = {4};  // width 8 cannot be halved four times
  EXPECT_THROW(random_search(ds, space, small_config(), 2, 0.2, 8), SearchError);
}

TEST(RandomSearch, TrialsCsvMarksSelection) {
  const Dataset ds = threshold_dataset(80, 8, 33);
  TrainConfig base = small_config();
  base.max_epochs = 1;
  SearchSpace space;
  space.block_counts = {1};
  const SearchResult r = random_search(ds, space, base, 3, 0.2, 9);
  const std::string csv = format_trials_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(csv.find(",1\n"), std::string::npos);
}

TEST(Reports, HistoryCsvLayout) {
  const std::vector<EpochRecord> h{{1, 0.1, 0.5, 0.75, 0.25, 1.0}};
  EXPECT_EQ(format_history_csv(h),
            "epoch,lr,train_loss,train_acc,val_loss,val_acc\n1,0.1,0.5,0.75,0.25,1\n");
}

}  // namespace
}  // namespace icmlp
