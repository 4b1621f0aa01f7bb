// Command-line front end: gen-data, train, eval, transform, selfcheck.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "puda/config.hpp"
#include "puda/data.hpp"
#include "puda/runinfo.hpp"
#include "puda/selfcheck.hpp"
#include "puda/ssl.hpp"
#include "puda/uda.hpp"

namespace fs = std::filesystem;
using namespace puda;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

void apply_overrides(config::FlatConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
}

void print_counts(const data::DomainDataset& ds) {
  std::printf("%s:\n", ds.name.c_str());
  for (const char* split : {"train", "val", "test"}) {
    std::vector<std::size_t> counts(ds.class_names.size(), 0);
    for (const auto& c : ds.split(split)) ++counts[static_cast<std::size_t>(*c.label)];
    std::printf("  %-5s", split);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      std::printf(" %s=%zu", ds.class_names[i].c_str(), counts[i]);
    }
    std::printf("\n");
  }
}

// --- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::string spec;
  std::string out;
  std::vector<std::string> sets;
  bool packed = false;
};

int cmd_gen_data(const GenArgs& a) {
  auto cfg = config::gen_schema();
  if (!a.spec.empty()) cfg.load(a.spec);
  apply_overrides(cfg, a.sets);
  const auto [src_spec, tgt_spec] = config::to_gen_specs(cfg);
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "gen.resolved", std::ios::trunc) << cfg.dump();
  for (const auto* spec : {&src_spec, &tgt_spec}) {
    const auto ds = data::gen_synthetic_domain(*spec);
    fs::path where = fs::path(a.out) / spec->name;
    if (a.packed) {
      where += ".pcds";
      data::write_packed(where, ds);
    } else {
      data::write_dataset(where, ds);
    }
    print_counts(ds);
    std::printf("  hash %s  %s\n", data::dataset_hash(where).c_str(), where.string().c_str());
  }
  return kOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string source;
  std::string target;
  std::string run_dir;
  std::vector<std::string> sets;
  std::string ssl;
  bool multi = false;
  bool single = false;
  bool crop_source = false;
  bool aug_mode = false;
  std::optional<double> alpha, lambda1, lambda2;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = config::train_schema();
  if (!a.config.empty()) cfg.load(a.config);
  apply_overrides(cfg, a.sets);
  if (!a.ssl.empty()) cfg.set("ssl.task", a.ssl);
  if (a.multi) cfg.set("ssl.multi_region", "true");
  if (a.single) cfg.set("ssl.multi_region", "false");
  if (a.crop_source) cfg.set("crop.source", "true");
  if (a.aug_mode) cfg.set("aug_mode.enabled", "true");
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  if (a.alpha) cfg.set("ssl.alpha", num(*a.alpha));
  if (a.lambda1) cfg.set("ssl.lambda1", num(*a.lambda1));
  if (a.lambda2) cfg.set("ssl.lambda2", num(*a.lambda2));
  if (a.seed) cfg.set("train.seed", std::to_string(*a.seed));
  if (a.epochs) cfg.set("train.epochs", std::to_string(*a.epochs));
  const auto tc = config::to_train_config(cfg);

  const auto source = data::load_dataset(a.source);
  const auto target = data::load_dataset(a.target);

  runinfo::RunMeta meta{.command = "train",
                        .config = cfg,
                        .seed = tc.seed,
                        .source = a.source,
                        .source_hash = data::dataset_hash(a.source),
                        .target = a.target,
                        .target_hash = data::dataset_hash(a.target)};
  runinfo::write_run_files(a.run_dir, meta);

  uda::TrainHooks hooks;
  hooks.run_dir = a.run_dir;
  if (!a.quiet) {
    hooks.on_epoch = [](const uda::EpochMetrics& m) {
      std::printf("epoch %3zu  loss %.4f  recon %.4f/%.4f  adv %.4f/%.4f  val %.4f", m.epoch,
                  m.main_loss, m.ssl_recon_src, m.ssl_recon_tgt, m.ssl_adv_src, m.ssl_adv_tgt,
                  m.src_val_acc);
      if (m.tgt_test_acc) std::printf("  target %.4f", *m.tgt_test_acc);
      std::printf("\n");
      std::fflush(stdout);
    };
  }

  nlohmann::json summary;
  uda::AdaptationResult result;
  if (tc.aug_mode) {
    auto aug = uda::augmentation_mode_train(source, target, tc, hooks);
    result = std::move(aug.phase2);
    nlohmann::json p1 = nlohmann::json::array();
    for (const auto& m : aug.phase1) p1.push_back(nlohmann::json::parse(uda::to_json_line(m)));
    summary["phase1"] = p1;
  } else {
    result = uda::run_adaptation(source, target, tc, hooks);
  }
  summary["best_epoch"] = result.train.best_epoch;
  summary["best_source_val_accuracy"] = result.train.best_val_acc;
  summary["source_val_accuracy"] = result.source_val.accuracy;
  summary["target_test_accuracy"] = result.target_test.accuracy;
  summary["epochs_run"] = result.train.metrics.size();
  std::ofstream(fs::path(a.run_dir) / "summary.json", std::ios::trunc) << summary.dump(2) << "\n";
  std::printf("best epoch %zu  source val %.4f  target test %.4f\n", result.train.best_epoch,
              result.source_val.accuracy, result.target_test.accuracy);
  return kOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string json_out;
};

void print_report(const uda::EvalReport& r) {
  std::printf("accuracy %.4f (%zu clouds)\n", r.accuracy, r.total);
  std::printf("%-12s %8s %6s\n", "class", "acc", "count");
  for (std::size_t c = 0; c < r.class_names.size(); ++c) {
    if (r.per_class_accuracy[c]) {
      std::printf("%-12s %8.4f %6zu\n", r.class_names[c].c_str(), *r.per_class_accuracy[c],
                  r.class_counts[c]);
    } else {
      std::printf("%-12s %8s %6zu\n", r.class_names[c].c_str(), "-", r.class_counts[c]);
    }
  }
  std::printf("confusion (rows: true, cols: predicted)\n");
  for (const auto& row : r.confusion) {
    for (auto v : row) std::printf(" %5zu", v);
    std::printf("\n");
  }
}

int cmd_eval(const EvalArgs& a) {
  auto model = nn::load_checkpoint(a.checkpoint);
  const auto ds = data::load_dataset(a.data);
  const auto report = uda::evaluate(model, ds, a.split);
  print_report(report);
  if (!a.json_out.empty()) std::ofstream(a.json_out, std::ios::trunc) << uda::to_json(report) << "\n";
  return kOk;
}

// --- transform --------------------------------------------------------------

struct TransformArgs {
  std::string checkpoint;
  std::string in;
  std::string out;
  double alpha = 0.05;
  double region_fraction = 0.5;
  std::uint64_t seed = 0;
};

int cmd_transform(const TransformArgs& a) {
  auto model = nn::load_checkpoint(a.checkpoint);
  const auto cloud = data::read_xyz(a.in);
  Rng rng(a.seed);
  RegionMask mask;
  const auto out = uda::destroy_with(model, cloud, a.alpha, a.region_fraction, rng, &mask);
  data::write_xyz(a.out, out);
  std::ofstream sidecar(a.out + ".mask", std::ios::trunc);
  for (auto m : mask.selected) sidecar << (m ? 1 : 0) << "\n";
  std::printf("destroyed %zu of %zu points around point %zu\n", mask.k, cloud.size(),
              mask.seed_index);
  return kOk;
}

// --- selfcheck --------------------------------------------------------------

int cmd_selfcheck(double skew) {
  check::SelfcheckOptions opts;
  opts.batchnorm_backward_skew = skew;
  const auto results = check::run_selfcheck(opts);
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%s  %-36s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    if (!r.passed) ++failed;
  }
  std::printf("%zu checks, %zu failed\n", results.size(), failed);
  return failed ? kCheckFailed : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  runinfo::configure_allocator();
  CLI::App app{"Point-cloud domain adaptation with a learnable destruction-reconstruction task"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic source and target domains");
  g->add_option("--spec", gen.spec, "Generation config file");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--set", gen.sets, "Override a config key (key=value)");
  g->add_flag("--packed", gen.packed, "Write packed .pcds files instead of directories");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on labeled source and unlabeled target data");
  t->add_option("--config", tr.config, "Training config file");
  t->add_option("--source", tr.source, "Source dataset (directory or .pcds)")->required();
  t->add_option("--target", tr.target, "Target dataset (directory or .pcds)")->required();
  t->add_option("--run-dir", tr.run_dir, "Run directory")->required();
  t->add_option("--set", tr.sets, "Override a config key (key=value)");
  t->add_option("--ssl", tr.ssl, "Auxiliary task")
      ->check(CLI::IsMember({"learnable", "rotate", "none"}));
  auto* multi = t->add_flag("--multi-region", tr.multi, "Destroy M regions per cloud");
  t->add_flag("--single-region", tr.single, "Destroy one region per cloud")->excludes(multi);
  t->add_flag("--crop-source", tr.crop_source, "Random plane crop on source clouds");
  t->add_flag("--aug-mode", tr.aug_mode, "Use the learned transformation as augmentation only");
  t->add_option("--alpha", tr.alpha, "Displacement scale");
  t->add_option("--lambda1", tr.lambda1, "Reconstruction weight");
  t->add_option("--lambda2", tr.lambda2, "Adversarial weight");
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--epochs", tr.epochs, "Epoch count");
  t->add_flag("--quiet", tr.quiet, "No per-epoch output");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset (directory or .pcds)")->required();
  e->add_option("--split", ev.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--json", ev.json_out, "Write the report as JSON");

  TransformArgs tf;
  auto* x = app.add_subcommand("transform", "Destroy one region of a cloud with a trained net");
  x->add_option("--checkpoint", tf.checkpoint, "Checkpoint file")->required();
  x->add_option("--in", tf.in, "Input .xyz cloud")->required();
  x->add_option("--out", tf.out, "Output .xyz cloud; the mask goes to <out>.mask")->required();
  x->add_option("--alpha", tf.alpha, "Displacement scale");
  x->add_option("--region-fraction", tf.region_fraction, "Fraction of points destroyed");
  x->add_option("--seed", tf.seed, "Random seed for the region");

  double skew = 0.0;
  auto* s = app.add_subcommand("selfcheck", "Run gradient, oracle and invariance checks");
  s->add_option("--bn-backward-skew", skew, "Fault injection for negative controls");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*x) return cmd_transform(tf);
    if (*s) return cmd_selfcheck(skew);
  } catch (const uda::NumericAbort& err) {
    std::fprintf(stderr, "numeric abort: %s\n", err.what());
    if (!err.last_good_checkpoint.empty()) {
      std::fprintf(stderr, "last good checkpoint: %s\n", err.last_good_checkpoint.c_str());
    }
    return kNumeric;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric abort: %s\n", err.what());
    return kNumeric;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  }
  return kUsage;
}
