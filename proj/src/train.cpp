// SPDX-License-Identifier: Apache-2.0
#include "icmlp/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "icmlp/errors.hpp"
#include "icmlp/format.hpp"
#include "icmlp/parallel.hpp"

namespace icmlp {

// Salts for the independent generator streams a single fit uses.
constexpr std::uint64_t kTrainStreamSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kSearchSplitSalt = 0xd1b54a32d192ed03ULL;
constexpr std::uint64_t kCvHoldoutSalt = 0x94d049bb133111ebULL;

// ---------------------------------------------------------------- Config

void TrainConfig::validate() const {
  if (n_residual == 0) throw ConfigError("n_residual must be at least 1");
  if (n_residual != n_downsample) {
    throw ConfigError("n_residual (" + std::to_string(n_residual) +
                      ") must equal n_downsample (" + std::to_string(n_downsample) + ")");
  }
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(initial_lr >= 0.0) || !std::isfinite(initial_lr)) {
    throw ConfigError("initial_lr must be a finite non-negative number");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be a finite non-negative number");
  }
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ConfigError("lr_gamma must lie in (0, 1]");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
}

ModelShape TrainConfig::model_shape(std::size_t input_dim, std::size_t n_classes) const {
  ModelShape shape;
  shape.input_dim = input_dim;
  shape.n_classes = n_classes;
  shape.n_residual = n_residual;
  shape.n_downsample = n_downsample;
  shape.dropout_p = dropout_p;
  shape.ablation = ablation;
  return shape;
}

TrainConfig preset_gender() {
  TrainConfig cfg;
  cfg.n_residual = 4;
  cfg.n_downsample = 4;
  cfg.batch_size = 512;
  cfg.initial_lr = 2e-2;
  cfg.weight_decay = 4e-3;
  cfg.lr_gamma = 6e-2;
  return cfg;
}

TrainConfig preset_age() {
  TrainConfig cfg;
  cfg.n_residual = 2;
  cfg.n_downsample = 2;
  cfg.batch_size = 128;
  cfg.initial_lr = 2e-3;
  cfg.weight_decay = 1e-4;
  cfg.lr_gamma = 4e-1;
  return cfg;
}

// -------------------------------------------------------- Early stopping

bool EarlyStopping::observe(double val_loss) {
  ++seen_;
  if (best_epoch_ == 0 || val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = seen_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

// -------------------------------------------------------------- Training

namespace {

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (argmax_row(logits.row(i)) == static_cast<std::size_t>(labels[i])) ++correct;
  }
  return correct;
}

}  // namespace

Metrics train_epoch(IcMlpModel& model, AdamW& optimizer, const Dataset& train,
                    std::size_t batch_size, Rng& rng) {
  model.set_mode(Mode::Train);
  const std::vector<Batch> batches = make_batches(train, batch_size, rng);
  if (batches.empty()) throw ConfigError("training set yields no batch of at least 2 samples");
  std::vector<ParamRef> params = model.parameters();

  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Batch& batch = batches[b];
    model.zero_grads();
    const Tensor logits = model.forward(batch.x, rng);
    LossResult loss = softmax_cross_entropy(logits, batch.y);
    if (!std::isfinite(loss.loss)) {
      throw DivergenceError("non-finite training loss at batch " + std::to_string(b));
    }
    model.backward(loss.grad_logits);
    optimizer.step(params);

    loss_sum += loss.loss * static_cast<double>(batch.y.size());
    correct += count_correct(logits, batch.y);
    seen += batch.y.size();
  }
  model.zero_grads();
  model.clear_caches();
  return {loss_sum / static_cast<double>(seen),
          static_cast<double>(correct) / static_cast<double>(seen)};
}

Metrics evaluate(const IcMlpModel& model, const Dataset& ds) {
  constexpr std::size_t kChunk = 1024;
  const std::size_t n = ds.size();
  if (n == 0) throw ParameterError("evaluate: empty dataset");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(start + kChunk, n);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Dataset part = subset(ds, idx);
    const Tensor logits = model.predict(part.features);
    const LossResult loss = softmax_cross_entropy(logits, part.labels);
    loss_sum += loss.loss * static_cast<double>(part.size());
    correct += count_correct(logits, part.labels);
  }
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

RunResult fit(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const Dataset* test) {
  cfg.validate();
  validate(train);
  validate(val);
  if (train.dim() != val.dim()) {
    throw DimensionError("train and validation feature widths differ (" +
                         std::to_string(train.dim()) + " vs " + std::to_string(val.dim()) + ")");
  }
  if (train.size() < 2) throw ConfigError("training set needs at least 2 samples");
  const std::size_t n_classes = std::max({train.n_classes, val.n_classes, std::size_t{2}});
  const ModelShape shape = cfg.model_shape(train.dim(), n_classes);

  Rng init_rng(cfg.seed);
  IcMlpModel model = build_model(shape, init_rng);
  if (cfg.init_weights_path) copy_state(load_model(*cfg.init_weights_path), model);

  AdamWOptions opts;
  opts.lr = cfg.initial_lr;
  opts.weight_decay = cfg.weight_decay;
  AdamW optimizer(opts);
  const ExponentialLr schedule{cfg.initial_lr, cfg.lr_gamma};
  Rng rng(derive_seed(cfg.seed, kTrainStreamSalt));

  RunResult result;
  EarlyStopping stopper(cfg.patience);
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = schedule.lr_at_epoch(e);
    optimizer.set_lr(rec.lr);
    Metrics tr;
    try {
      tr = train_epoch(model, optimizer, train, cfg.batch_size, rng);
    } catch (const DivergenceError& err) {
      throw DivergenceError(std::string(err.what()) + " in epoch " + std::to_string(rec.epoch));
    }
    model.set_mode(Mode::Eval);
    const Metrics va = evaluate(model, val);
    if (!std::isfinite(va.loss)) {
      throw DivergenceError("non-finite validation loss in epoch " + std::to_string(rec.epoch));
    }
    rec.train_loss = tr.loss;
    rec.train_acc = tr.acc;
    rec.val_loss = va.loss;
    rec.val_acc = va.acc;
    result.history.push_back(rec);
    if (stopper.observe(va.loss)) result.model = model;
    if (stopper.should_stop()) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  result.model.set_mode(Mode::Eval);
  if (test != nullptr) result.test = evaluate(result.model, *test);
  return result;
}

// ------------------------------------------------------ Cross-validation

MetricStats mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  // Shifted by the first value so a constant sample has exactly zero spread.
  const double n = static_cast<double>(values.size());
  const double shift = values.front();
  double sum = 0.0;
  for (double v : values) sum += v - shift;
  const double offset = sum / n;
  double sq = 0.0;
  for (double v : values) sq += (v - shift - offset) * (v - shift - offset);
  return {shift + offset, std::sqrt(sq / n)};
}

Aggregate aggregate_runs(const std::string& variant, const std::vector<RunSummary>& runs) {
  Aggregate agg;
  agg.variant = variant;
  agg.runs = runs.size();
  auto stats = [&runs](auto field) {
    std::vector<double> v;
    v.reserve(runs.size());
    for (const RunSummary& r : runs) v.push_back(field(r));
    return mean_std(v);
  };
  agg.train_loss = stats([](const RunSummary& r) { return r.train.loss; });
  agg.train_acc = stats([](const RunSummary& r) { return r.train.acc; });
  agg.val_loss = stats([](const RunSummary& r) { return r.val.loss; });
  agg.val_acc = stats([](const RunSummary& r) { return r.val.acc; });
  agg.test_loss = stats([](const RunSummary& r) { return r.test.loss; });
  agg.test_acc = stats([](const RunSummary& r) { return r.test.acc; });
  return agg;
}

namespace {

[[noreturn]] void rethrow_with_context(const std::exception_ptr& error, const std::string& context) {
  try {
    std::rethrow_exception(error);
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + " " + context);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()) + " " + context);
  } catch (const std::exception& e) {
    throw Error(std::string(e.what()) + " " + context);
  }
}

std::vector<std::size_t> concat_folds(const std::vector<std::vector<std::size_t>>& folds,
                                      std::size_t skip_a, std::size_t skip_b) {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f == skip_a || f == skip_b) continue;
    out.insert(out.end(), folds[f].begin(), folds[f].end());
  }
  return out;
}

}  // namespace

CvReport cross_validate(const Dataset& ds, const TrainConfig& cfg, std::size_t k,
                        std::size_t repeats, std::size_t threads) {
  cfg.validate();
  validate(ds);
  CvReport report;
  report.variant = cfg.ablation.name();
  report.plan = make_folds(ds.size(), k, repeats, cfg.seed);
  const std::size_t total = k * repeats;
  report.runs.resize(total);

  auto errors = parallel_for(total, threads, [&](std::size_t run) {
    const std::size_t r = run / k, f = run % k;
    const auto& folds = report.plan.folds[r];
    const Dataset test = subset(ds, folds[f]);
    Dataset train, val;
    if (k >= 3) {
      const std::size_t v = (f + 1) % k;
      train = subset(ds, concat_folds(folds, f, v));
      val = subset(ds, folds[v]);
    } else {
      const Dataset rest = subset(ds, concat_folds(folds, f, f));
      Rng split_rng(derive_seed(cfg.seed ^ kCvHoldoutSalt, run));
      Split split = holdout_split(rest, 0.1, split_rng);
      train = std::move(split.train);
      val = std::move(split.held);
    }
    TrainConfig run_cfg = cfg;
    run_cfg.seed = derive_seed(cfg.seed, run);
    const RunResult res = fit(train, val, run_cfg, &test);

    RunSummary& s = report.runs[run];
    s.variant = report.variant;
    s.repeat = r;
    s.fold = f;
    s.best_epoch = res.best_epoch;
    s.train = {res.best_record().train_loss, res.best_record().train_acc};
    s.val = {res.best_record().val_loss, res.best_record().val_acc};
    s.test = *res.test;
    s.history = res.history;
  });
  for (std::size_t run = 0; run < total; ++run) {
    if (errors[run]) {
      rethrow_with_context(errors[run], "(variant " + report.variant + ", repeat " +
                                            std::to_string(run / k) + ", fold " +
                                            std::to_string(run % k) + ")");
    }
  }
  report.aggregate = aggregate_runs(report.variant, report.runs);
  return report;
}

std::vector<AblationFlags> standard_variants() {
  return {
      AblationFlags{},
      AblationFlags{.no_dropout = true},
      AblationFlags{.no_ic = true},
      AblationFlags{.no_skip = true},
      AblationFlags{.no_ic = true, .no_skip = true},
  };
}

std::vector<CvReport> ablation_sweep(const Dataset& ds, const TrainConfig& cfg,
                                     const std::vector<AblationFlags>& variants, std::size_t k,
                                     std::size_t repeats, std::size_t threads) {
  std::vector<CvReport> reports;
  reports.reserve(variants.size());
  for (const AblationFlags& flags : variants) {
    TrainConfig variant_cfg = cfg;
    variant_cfg.ablation = flags;
    reports.push_back(cross_validate(ds, variant_cfg, k, repeats, threads));
  }
  return reports;
}

// --------------------------------------------------------- Random search

namespace {

double sample_log(Rng& rng, const LogRange& range) {
  const double u = rng.next_double();
  if (range.lo == range.hi) return range.lo;
  const double log_lo = std::log(range.lo), log_hi = std::log(range.hi);
  return std::exp(log_lo + u * (log_hi - log_lo));
}

template <class T>
T sample_choice(Rng& rng, const std::vector<T>& choices) {
  return choices[static_cast<std::size_t>(rng.uniform_index(choices.size()))];
}

void validate_space(const SearchSpace& space) {
  if (space.block_counts.empty() || space.batch_sizes.empty()) {
    throw ConfigError("search space needs at least one block count and batch size");
  }
  for (const LogRange* r : {&space.initial_lr, &space.weight_decay, &space.lr_gamma}) {
    if (!(r->lo > 0.0 && r->lo <= r->hi)) {
      throw ConfigError("search ranges must satisfy 0 < lo <= hi");
    }
  }
  for (double lr : space.initial_lr_values) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
      throw ConfigError("learning-rate choices must be finite and non-negative");
    }
  }
}

}  // namespace

SearchResult random_search(const Dataset& ds, const SearchSpace& space, const TrainConfig& base,
                           std::size_t n_trials, double holdout_fraction, std::uint64_t seed,
                           std::size_t threads) {
  if (n_trials < 1) throw ConfigError("random search needs at least one trial");
  validate_space(space);
  validate(ds);

  SearchResult result;
  Rng sampler(seed);
  for (std::size_t i = 0; i < n_trials; ++i) {
    TrialRecord trial;
    trial.index = i;
    trial.cfg = base;
    const std::size_t blocks = sample_choice(sampler, space.block_counts);
    trial.cfg.n_residual = blocks;
    trial.cfg.n_downsample = blocks;
    trial.cfg.batch_size = sample_choice(sampler, space.batch_sizes);
    trial.cfg.initial_lr = space.initial_lr_values.empty()
                               ? sample_log(sampler, space.initial_lr)
                               : sample_choice(sampler, space.initial_lr_values);
    trial.cfg.weight_decay = sample_log(sampler, space.weight_decay);
    trial.cfg.lr_gamma = sample_log(sampler, space.lr_gamma);
    trial.cfg.seed = derive_seed(seed, i);
    result.trials.push_back(std::move(trial));
  }

  Rng split_rng(derive_seed(seed, kSearchSplitSalt));
  const Split split = holdout_split(ds, holdout_fraction, split_rng);

  auto errors = parallel_for(n_trials, threads, [&](std::size_t i) {
    TrialRecord& trial = result.trials[i];
    const RunResult run = fit(split.train, split.held, trial.cfg);
    trial.ok = true;
    trial.best_epoch = run.best_epoch;
    trial.val_loss = run.best_val_loss;
    trial.val_acc = run.best_record().val_acc;
  });

  std::string failures;
  bool found = false;
  for (std::size_t i = 0; i < n_trials; ++i) {
    TrialRecord& trial = result.trials[i];
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        trial.error = e.what();
      }
      failures += "\n  trial " + std::to_string(i) + ": " + trial.error;
      continue;
    }
    if (!found || trial.val_loss < result.trials[result.best_index].val_loss) {
      result.best_index = i;
      found = true;
    }
  }
  if (!found) throw SearchError("every random-search trial failed:" + failures);
  result.best = result.trials[result.best_index].cfg;
  return result;
}

// --------------------------------------------------------------- Reports

std::string format_history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
  for (const EpochRecord& r : history) {
    out += std::to_string(r.epoch) + ',' + format_double(r.lr) + ',' +
           format_double(r.train_loss) + ',' +
           format_double(r.train_acc) + ',' + format_double(r.val_loss) + ',' +
           format_double(r.val_acc) + '\n';
  }
  return out;
}

std::string format_runs_csv(const std::vector<CvReport>& reports) {
  std::string out =
      "variant,repeat,fold,best_epoch,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc\n";
  for (const CvReport& rep : reports) {
    for (const RunSummary& r : rep.runs) {
      out += r.variant + ',' + std::to_string(r.repeat) + ',' + std::to_string(r.fold) + ',' +
             std::to_string(r.best_epoch) + ',' + format_double(r.train.loss) + ',' +
             format_double(r.train.acc) + ',' + format_double(r.val.loss) + ',' +
             format_double(r.val.acc) + ',' + format_double(r.test.loss) + ',' +
             format_double(r.test.acc) + '\n';
    }
  }
  return out;
}

std::string format_aggregate_csv(const std::vector<CvReport>& reports) {
  std::string out =
      "variant,runs,train_loss_mean,train_loss_std,train_acc_mean,train_acc_std,"
      "val_loss_mean,val_loss_std,val_acc_mean,val_acc_std,"
      "test_loss_mean,test_loss_std,test_acc_mean,test_acc_std\n";
  for (const CvReport& rep : reports) {
    const Aggregate& a = rep.aggregate;
    out += a.variant + ',' + std::to_string(a.runs);
    for (const MetricStats* m : {&a.train_loss, &a.train_acc, &a.val_loss, &a.val_acc,
                                 &a.test_loss, &a.test_acc}) {
      out += ',' + format_double(m->mean) + ',' + format_double(m->std);
    }
    out += '\n';
  }
  return out;
}

std::string format_trials_csv(const SearchResult& result) {
  std::string out =
      "trial,n_residual,n_downsample,batch_size,initial_lr,weight_decay,lr_gamma,status,"
      "best_epoch,val_loss,val_acc,selected\n";
  for (const TrialRecord& t : result.trials) {
    out += std::to_string(t.index) + ',' + std::to_string(t.cfg.n_residual) + ',' +
           std::to_string(t.cfg.n_downsample) + ',' + std::to_string(t.cfg.batch_size) + ',' +
           format_double(t.cfg.initial_lr) + ',' + format_double(t.cfg.weight_decay) + ',' +
           format_double(t.cfg.lr_gamma) + ',' + (t.ok ? "ok" : "failed") + ',' +
           std::to_string(t.best_epoch) + ',' + (t.ok ? format_double(t.val_loss) : "") + ',' +
           (t.ok ? format_double(t.val_acc) : "") + ',' +
           (t.ok && t.index == result.best_index ? "1" : "0") + '\n';
  }
  return out;
}

}  // namespace icmlp
