// SPDX-License-Identifier: Apache-2.0
//
// The `icmlp` command-line driver. Training options resolve in four layers,
// each overriding the previous one:
//
//   built-in defaults  <  --preset  <  --config file  <  explicit flags
//
// The resolved options are printed as `key = value` lines before any work
// starts, so a run log always records exactly what was executed.

#include <algorithm>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "icmlp/cli.hpp"
#include "icmlp/errors.hpp"
#include "icmlp/format.hpp"
#include "icmlp/layers.hpp"
#include "icmlp/uncertainty.hpp"

namespace icmlp {

namespace {

constexpr std::uint64_t kHoldoutSalt = 0x686f6c646f7574ULL;  // "holdout"

// Training-config flags shared by train / crossval / ablate / search /
// count-params. Values land in scratch fields and are copied onto the
// config only when the flag was actually given.
struct TrainFlags {
  std::string preset;
  std::string config_path;
  TrainConfig scratch;
  std::string init_weights;

  CLI::Option* preset_opt = nullptr;
  CLI::Option* config_opt = nullptr;
  CLI::Option* n_residual = nullptr;
  CLI::Option* n_downsample = nullptr;
  CLI::Option* blocks = nullptr;
  CLI::Option* batch_size = nullptr;
  CLI::Option* lr = nullptr;
  CLI::Option* weight_decay = nullptr;
  CLI::Option* gamma = nullptr;
  CLI::Option* dropout = nullptr;
  CLI::Option* patience = nullptr;
  CLI::Option* max_epochs = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* no_dropout = nullptr;
  CLI::Option* no_ic = nullptr;
  CLI::Option* no_skip = nullptr;
  CLI::Option* init_weights_opt = nullptr;

  void attach(CLI::App* app, bool with_seed = true) {
    preset_opt = app->add_option("--preset", preset, "Named preset: gender or age")
                     ->check(CLI::IsMember({"gender", "age"}));
    config_opt = app->add_option("--config", config_path, "key = value config file");
    blocks = app->add_option("--blocks", scratch.n_residual,
                             "Residual and downsample block count (sets both)");
    n_residual = app->add_option("--n-residual", scratch.n_residual, "Residual blocks");
    n_downsample = app->add_option("--n-downsample", scratch.n_downsample, "Downsample blocks");
    batch_size = app->add_option("--batch-size", scratch.batch_size, "Mini-batch size");
    lr = app->add_option("--lr", scratch.initial_lr, "Initial learning rate");
    weight_decay = app->add_option("--weight-decay", scratch.weight_decay, "AdamW weight decay");
    gamma = app->add_option("--gamma", scratch.lr_gamma, "Per-epoch LR decay factor");
    dropout = app->add_option("--dropout", scratch.dropout_p, "Dropout probability");
    patience = app->add_option("--patience", scratch.patience, "Early-stopping patience");
    max_epochs = app->add_option("--max-epochs", scratch.max_epochs, "Epoch limit");
    if (with_seed) seed = app->add_option("--seed", scratch.seed, "Random seed");
    no_dropout = app->add_flag("--no-dropout", "Ablate dropout");
    no_ic = app->add_flag("--no-ic", "Ablate the IC layers (batch norm and dropout)");
    no_skip = app->add_flag("--no-skip", "Ablate skip connections");
    init_weights_opt =
        app->add_option("--init-weights", init_weights, "Warm-start from a saved model");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (preset_opt->count() > 0) cfg = preset == "age" ? preset_age() : preset_gender();
    if (config_opt->count() > 0) apply_config_file(cfg, config_path);
    auto given = [](const CLI::Option* o) { return o != nullptr && o->count() > 0; };
    if (given(blocks)) {
      cfg.n_residual = scratch.n_residual;
      cfg.n_downsample = scratch.n_residual;
    }
    if (given(n_residual)) cfg.n_residual = scratch.n_residual;
    if (given(n_downsample)) cfg.n_downsample = scratch.n_downsample;
    if (given(batch_size)) cfg.batch_size = scratch.batch_size;
    if (given(lr)) cfg.initial_lr = scratch.initial_lr;
    if (given(weight_decay)) cfg.weight_decay = scratch.weight_decay;
    if (given(gamma)) cfg.lr_gamma = scratch.lr_gamma;
    if (given(dropout)) cfg.dropout_p = scratch.dropout_p;
    if (given(patience)) cfg.patience = scratch.patience;
    if (given(max_epochs)) cfg.max_epochs = scratch.max_epochs;
    if (given(seed)) cfg.seed = scratch.seed;
    if (given(no_dropout)) cfg.ablation.no_dropout = true;
    if (given(no_ic)) cfg.ablation.no_ic = true;
    if (given(no_skip)) cfg.ablation.no_skip = true;
    if (given(init_weights_opt)) cfg.init_weights_path = init_weights;
    cfg.validate();
    return cfg;
  }
};

// Extra `key = value` lines describing the command-specific options.
using Settings = std::vector<std::pair<std::string, std::string>>;

void print_settings(std::ostream& out, const std::string& command, const Settings& settings,
                    const TrainConfig* cfg) {
  out << "# icmlp " << command << '\n';
  for (const auto& [key, value] : settings) out << key << " = " << value << '\n';
  if (cfg != nullptr) out << format_config(*cfg);
  out << "# ---\n";
}

std::string metrics_line(const std::string& label, const Metrics& m) {
  return label + " loss=" + format_double(m.loss) + " acc=" + format_double(m.acc);
}

Dataset load_for_model(const std::string& path, const IcMlpModel& model) {
  Dataset ds = load_csv(path, model.input_dim());
  if (ds.n_classes > model.n_classes()) {
    throw LabelError(path + ": label " + std::to_string(ds.n_classes - 1) +
                     " exceeds the model's " + std::to_string(model.n_classes()) + " classes");
  }
  ds.n_classes = model.n_classes();
  return ds;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::string format_predictions_csv(const Tensor& probs) {
  std::string out = "sample_index,predicted_class";
  for (std::size_t c = 0; c < probs.cols(); ++c) out += ",p_" + std::to_string(c);
  out += '\n';
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto row = probs.row(i);
    out += std::to_string(i) + ',' + std::to_string(argmax_row(row));
    for (double p : row) out += ',' + format_double(p);
    out += '\n';
  }
  return out;
}

std::vector<AblationFlags> parse_variants(const std::vector<std::string>& names) {
  if (names.empty()) return standard_variants();
  std::vector<AblationFlags> out;
  for (const auto& n : names) out.push_back(AblationFlags::from_name(n));
  return out;
}

// Each subcommand's option storage. Kept in one place so the CLI11 callbacks
// can bind to stable addresses.
struct Options {
  TrainFlags train_flags, cv_flags, ablate_flags, search_flags, count_flags;

  // train
  std::string train_data, val_data, test_data, train_out, history_out;
  double holdout = 0.1;
  // eval / predict / uncertainty
  std::string model_path, data_path, out_path;
  std::size_t passes = 512;
  std::size_t threads = 1;
  std::uint64_t mc_seed = 0;
  std::size_t top = 0;
  std::string order = "highest";
  bool force = false;
  // crossval / ablate
  std::size_t k = 5;
  std::size_t repeats = 5;
  std::string runs_out, aggregate_out;
  std::vector<std::string> variants;
  // search
  std::size_t trials = 20;
  std::string trials_out, best_config_out;
  // count-params
  std::size_t input_dim = 512;
  std::size_t n_classes = 2;
  // gen-synthetic
  std::size_t gen_n = 2000;
  std::size_t gen_dim = 512;
  std::size_t gen_classes = 2;
  double gen_difficulty = 6.0;
  std::uint64_t gen_seed = 0;
};

int do_train(const Options& o, std::ostream& out) {
  const TrainConfig cfg = o.train_flags.resolve();
  print_settings(out, "train",
                 {{"data", o.train_data},
                  {"val_data", o.val_data},
                  {"test_data", o.test_data},
                  {"holdout", format_double(o.holdout)},
                  {"out", o.train_out},
                  {"history_out", o.history_out}},
                 &cfg);

  Dataset train = load_csv(o.train_data);
  Dataset val;
  if (!o.val_data.empty()) {
    val = load_csv(o.val_data, train.dim());
  } else {
    Rng split_rng(derive_seed(cfg.seed, kHoldoutSalt));
    Split split = holdout_split(train, o.holdout, split_rng);
    train = std::move(split.train);
    val = std::move(split.held);
  }
  std::optional<Dataset> test;
  if (!o.test_data.empty()) test = load_csv(o.test_data, train.dim());

  const std::size_t classes =
      std::max({train.n_classes, val.n_classes, test ? test->n_classes : std::size_t{0}});
  train.n_classes = val.n_classes = classes;
  if (test) test->n_classes = classes;

  const RunResult result = fit(train, val, cfg, test ? &*test : nullptr);
  for (const auto& rec : result.history) {
    out << "epoch " << rec.epoch << " lr=" << format_double(rec.lr)
        << " train_loss=" << format_double(rec.train_loss)
        << " train_acc=" << format_double(rec.train_acc)
        << " val_loss=" << format_double(rec.val_loss)
        << " val_acc=" << format_double(rec.val_acc) << '\n';
  }
  const EpochRecord& best = result.best_record();
  out << "best_epoch " << result.best_epoch << '\n';
  out << metrics_line("val", {best.val_loss, best.val_acc}) << '\n';
  if (result.test) out << metrics_line("test", *result.test) << '\n';

  if (!o.train_out.empty()) save_model(result.model, o.train_out);
  if (!o.history_out.empty()) write_text_file(o.history_out, format_history_csv(result.history));
  return kExitOk;
}

int do_eval(const Options& o, std::ostream& out) {
  print_settings(out, "eval", {{"model", o.model_path}, {"data", o.data_path}, {"out", o.out_path}},
                 nullptr);
  const IcMlpModel model = load_model(o.model_path);
  const Dataset ds = load_for_model(o.data_path, model);
  const Metrics m = evaluate(model, ds);
  out << metrics_line("eval", m) << '\n';
  if (!o.out_path.empty()) {
    write_text_file(o.out_path,
                    "loss,acc\n" + format_double(m.loss) + ',' + format_double(m.acc) + '\n');
  }
  return kExitOk;
}

int do_predict(const Options& o, std::ostream& out) {
  print_settings(out, "predict",
                 {{"model", o.model_path}, {"data", o.data_path}, {"out", o.out_path}}, nullptr);
  const IcMlpModel model = load_model(o.model_path);
  const Dataset ds = load_for_model(o.data_path, model);
  const std::string csv = format_predictions_csv(softmax(model.predict(ds.features)));
  if (o.out_path.empty()) {
    out << csv;
  } else {
    write_text_file(o.out_path, csv);
  }
  return kExitOk;
}

int do_uncertainty(const Options& o, std::ostream& out) {
  print_settings(out, "uncertainty",
                 {{"model", o.model_path},
                  {"data", o.data_path},
                  {"out", o.out_path},
                  {"passes", std::to_string(o.passes)},
                  {"threads", std::to_string(o.threads)},
                  {"seed", std::to_string(o.mc_seed)},
                  {"top", std::to_string(o.top)},
                  {"order", o.order},
                  {"force", o.force ? "true" : "false"}},
                 nullptr);
  const IcMlpModel model = load_model(o.model_path);
  const Dataset ds = load_for_model(o.data_path, model);
  McOptions mc;
  mc.passes = o.passes;
  mc.threads = o.threads;
  mc.force = o.force;
  Rng rng(o.mc_seed);
  const PredictiveSummary summary = mc_dropout_predict(model, ds.features, mc, rng);

  double mean_entropy = 0.0;
  for (double h : summary.entropy) mean_entropy += h;
  mean_entropy /= static_cast<double>(summary.entropy.size());
  out << "mean_entropy " << format_double(mean_entropy) << '\n';
  if (o.top > 0) {
    const auto order = o.order == "lowest" ? RankOrder::Lowest : RankOrder::Highest;
    const auto ranked =
        rank_by_entropy(summary.entropy, std::min(o.top, summary.entropy.size()), order);
    for (std::size_t idx : ranked) {
      out << o.order << ' ' << idx << " entropy=" << format_double(summary.entropy[idx]) << '\n';
    }
  }
  const std::string csv = format_uncertainty_csv(summary);
  if (o.out_path.empty()) {
    out << csv;
  } else {
    write_text_file(o.out_path, csv);
  }
  return kExitOk;
}

void write_cv_reports(const std::vector<CvReport>& reports, const Options& o, std::ostream& out) {
  for (const auto& rep : reports) {
    const Aggregate& a = rep.aggregate;
    out << rep.variant << " runs=" << a.runs << " val_loss=" << format_double(a.val_loss.mean)
        << "+-" << format_double(a.val_loss.std) << " test_acc=" << format_double(a.test_acc.mean)
        << "+-" << format_double(a.test_acc.std) << '\n';
  }
  if (!o.runs_out.empty()) write_text_file(o.runs_out, format_runs_csv(reports));
  if (!o.aggregate_out.empty()) write_text_file(o.aggregate_out, format_aggregate_csv(reports));
}

int do_crossval(const Options& o, std::ostream& out) {
  const TrainConfig cfg = o.cv_flags.resolve();
  print_settings(out, "crossval",
                 {{"data", o.data_path},
                  {"k", std::to_string(o.k)},
                  {"repeats", std::to_string(o.repeats)},
                  {"threads", std::to_string(o.threads)},
                  {"runs_out", o.runs_out},
                  {"aggregate_out", o.aggregate_out}},
                 &cfg);
  const Dataset ds = load_csv(o.data_path);
  write_cv_reports({cross_validate(ds, cfg, o.k, o.repeats, o.threads)}, o, out);
  return kExitOk;
}

int do_ablate(const Options& o, std::ostream& out) {
  const TrainConfig cfg = o.ablate_flags.resolve();
  const auto variants = parse_variants(o.variants);
  std::string names;
  for (const auto& v : variants) names += (names.empty() ? "" : ",") + v.name();
  print_settings(out, "ablate",
                 {{"data", o.data_path},
                  {"k", std::to_string(o.k)},
                  {"repeats", std::to_string(o.repeats)},
                  {"threads", std::to_string(o.threads)},
                  {"variants", names},
                  {"runs_out", o.runs_out},
                  {"aggregate_out", o.aggregate_out}},
                 &cfg);
  const Dataset ds = load_csv(o.data_path);
  write_cv_reports(ablation_sweep(ds, cfg, variants, o.k, o.repeats, o.threads), o, out);
  return kExitOk;
}

int do_search(const Options& o, std::ostream& out) {
  const TrainConfig base = o.search_flags.resolve();
  print_settings(out, "search",
                 {{"data", o.data_path},
                  {"trials", std::to_string(o.trials)},
                  {"holdout", format_double(o.holdout)},
                  {"threads", std::to_string(o.threads)},
                  {"out", o.trials_out},
                  {"best_config_out", o.best_config_out}},
                 &base);
  const Dataset ds = load_csv(o.data_path);
  const SearchResult result =
      random_search(ds, SearchSpace{}, base, o.trials, o.holdout, base.seed, o.threads);
  for (const auto& t : result.trials) {
    out << "trial " << t.index << (t.ok ? " ok" : " failed");
    if (t.ok) out << " val_loss=" << format_double(t.val_loss) << " val_acc=" << format_double(t.val_acc);
    if (!t.ok) out << " error=" << t.error;
    out << '\n';
  }
  out << "best_trial " << result.best_index << '\n' << format_config(result.best);
  if (!o.trials_out.empty()) write_text_file(o.trials_out, format_trials_csv(result));
  if (!o.best_config_out.empty()) write_text_file(o.best_config_out, format_config(result.best));
  return kExitOk;
}

int do_count_params(const Options& o, std::ostream& out) {
  const TrainConfig cfg = o.count_flags.resolve();
  print_settings(out, "count-params",
                 {{"input_dim", std::to_string(o.input_dim)},
                  {"n_classes", std::to_string(o.n_classes)}},
                 &cfg);
  const IcMlpModel model = build_model_skeleton(cfg.model_shape(o.input_dim, o.n_classes));
  out << model.param_count() << '\n';
  return kExitOk;
}

int do_gen_synthetic(const Options& o, std::ostream& out) {
  print_settings(out, "gen-synthetic",
                 {{"n", std::to_string(o.gen_n)},
                  {"dim", std::to_string(o.gen_dim)},
                  {"classes", std::to_string(o.gen_classes)},
                  {"difficulty", format_double(o.gen_difficulty)},
                  {"seed", std::to_string(o.gen_seed)},
                  {"out", o.out_path}},
                 nullptr);
  gen_synthetic(o.gen_n, o.gen_dim, o.gen_classes, o.gen_difficulty, o.gen_seed, o.out_path);
  out << "wrote " << o.gen_n << " rows to " << o.out_path << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"icmlp: residual MLP with IC layers, trained with AdamW", "icmlp"};
  app.require_subcommand(1);
  app.fallthrough(false);
  Options o;

  auto* train = app.add_subcommand("train", "Train one model with early stopping");
  o.train_flags.attach(train);
  train->add_option("--data", o.train_data, "Training CSV")->required();
  train->add_option("--val-data", o.val_data, "Validation CSV (default: holdout of --data)");
  train->add_option("--test-data", o.test_data, "Optional test CSV");
  train->add_option("--holdout", o.holdout, "Validation fraction when --val-data is absent")
      ->check(CLI::Range(0.0, 1.0));
  train->add_option("--out", o.train_out, "Write the best model here");
  train->add_option("--history-out", o.history_out, "Write per-epoch history CSV here");

  auto* eval = app.add_subcommand("eval", "Evaluate a saved model on a dataset");
  eval->add_option("--model", o.model_path, "Saved model")->required();
  eval->add_option("--data", o.data_path, "Dataset CSV")->required();
  eval->add_option("--out", o.out_path, "Write loss/accuracy CSV here");

  auto* predict = app.add_subcommand("predict", "Class probabilities of a saved model");
  predict->add_option("--model", o.model_path, "Saved model")->required();
  predict->add_option("--data", o.data_path, "Dataset CSV")->required();
  predict->add_option("--out", o.out_path, "Write predictions CSV here (default: stdout)");

  auto* unc = app.add_subcommand("uncertainty", "Monte-Carlo dropout predictive entropy");
  unc->add_option("--model", o.model_path, "Saved model")->required();
  unc->add_option("--data", o.data_path, "Dataset CSV")->required();
  unc->add_option("--out", o.out_path, "Write entropy CSV here (default: stdout)");
  unc->add_option("--passes", o.passes, "Stochastic forward passes")->check(CLI::PositiveNumber);
  unc->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  unc->add_option("--seed", o.mc_seed, "Random seed");
  unc->add_option("--top", o.top, "Also list the N most/least uncertain samples");
  unc->add_option("--order", o.order, "highest or lowest")
      ->check(CLI::IsMember({"highest", "lowest"}));
  unc->add_flag("--force", o.force, "Run even if the model has no dropout");

  auto* cv = app.add_subcommand("crossval", "Repeated k-fold cross-validation");
  o.cv_flags.attach(cv);
  cv->add_option("--data", o.data_path, "Dataset CSV")->required();
  cv->add_option("--k", o.k, "Folds");
  cv->add_option("--repeats", o.repeats, "Repeats");
  cv->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  cv->add_option("--out", o.runs_out, "Write per-run CSV here");
  cv->add_option("--aggregate-out", o.aggregate_out, "Write aggregate CSV here");

  auto* ablate = app.add_subcommand("ablate", "Cross-validate every architecture variant");
  o.ablate_flags.attach(ablate);
  ablate->add_option("--data", o.data_path, "Dataset CSV")->required();
  ablate->add_option("--k", o.k, "Folds");
  ablate->add_option("--repeats", o.repeats, "Repeats");
  ablate->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  ablate->add_option("--variants", o.variants,
                     "Variant names (full, no_dropout, no_ic, no_skip, no_ic+no_skip)")
      ->delimiter(',');
  ablate->add_option("--out", o.runs_out, "Write per-run CSV here");
  ablate->add_option("--aggregate-out", o.aggregate_out, "Write aggregate CSV here");

  auto* search = app.add_subcommand("search", "Random hyperparameter search");
  o.search_flags.attach(search);
  search->add_option("--data", o.data_path, "Dataset CSV")->required();
  search->add_option("--trials", o.trials, "Number of sampled configs")
      ->check(CLI::PositiveNumber);
  search->add_option("--holdout", o.holdout, "Held-out fraction")->check(CLI::Range(0.0, 1.0));
  search->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  search->add_option("--out", o.trials_out, "Write per-trial CSV here");
  search->add_option("--best-config-out", o.best_config_out, "Write the best config here");

  auto* count = app.add_subcommand("count-params", "Count learnable parameters");
  o.count_flags.attach(count, false);
  count->add_option("--input-dim", o.input_dim, "Input dimension");
  count->add_option("--classes", o.n_classes, "Number of classes");

  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic clustered dataset");
  gen->add_option("--n", o.gen_n, "Samples")->check(CLI::PositiveNumber);
  gen->add_option("--dim", o.gen_dim, "Feature dimension")->check(CLI::PositiveNumber);
  gen->add_option("--classes", o.gen_classes, "Classes");
  gen->add_option("--difficulty", o.gen_difficulty, "Noise scale; 0 is separable");
  gen->add_option("--seed", o.gen_seed, "Random seed");
  gen->add_option("--out", o.out_path, "Output CSV")->required();

  if (args.empty()) {
    err << app.help();
    return kExitUsage;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  using Handler = int (*)(const Options&, std::ostream&);
  const std::vector<std::pair<CLI::App*, Handler>> handlers = {
      {train, do_train},   {eval, do_eval},         {predict, do_predict},
      {unc, do_uncertainty}, {cv, do_crossval},     {ablate, do_ablate},
      {search, do_search}, {count, do_count_params}, {gen, do_gen_synthetic}};
  for (const auto& [sub, handler] : handlers) {
    if (!sub->parsed()) continue;
    try {
      return handler(o, out);
    } catch (const ConfigError& e) {
      err << "icmlp " << sub->get_name() << ": configuration error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "icmlp " << sub->get_name() << ": " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace icmlp
