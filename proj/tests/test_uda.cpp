#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include <unistd.h>

#include "doctest.h"
#include "puda/selfcheck.hpp"
#include "puda/uda.hpp"

using namespace puda;
namespace fs = std::filesystem;

namespace {

data::SyntheticSpec tiny_spec(const std::string& name, std::uint64_t seed) {
  data::SyntheticSpec s;
  s.name = name;
  s.classes = {"sphere", "cube", "torus"};
  s.n_points = 32;
  s.train_per_class = 8;
  s.test_per_class = 4;
  s.val_fraction = 0.25;
  s.seed = seed;
  return s;
}

uda::TrainConfig tiny_config(uda::SslTask task, std::size_t epochs = 3) {
  uda::TrainConfig c;
  c.ssl_task = task;
  c.epochs = epochs;
  c.batch_size = 8;
  c.seed = 5;
  c.network = check::tiny_network();
  c.lr = 0.01;
  return c;
}

const data::DomainDataset& source() {
  static const auto ds = data::gen_synthetic_domain(tiny_spec("src", 1));
  return ds;
}

const data::DomainDataset& target() {
  static const auto ds = [] {
    auto s = tiny_spec("tgt", 2);
    s.noise_sigma = 0.02;
    s.crop_retain = 0.8;
    return data::gen_synthetic_domain(s);
  }();
  return ds;
}

std::vector<std::pair<std::string, ad::Tensor>> state_of(nn::Model& m) {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  m.visit_state([&](const std::string& n, ad::Tensor& t) { out.emplace_back(n, t); });
  return out;
}

bool same_metrics(const std::vector<uda::EpochMetrics>& a,
                  const std::vector<uda::EpochMetrics>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (uda::to_json_line(a[i]) != uda::to_json_line(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("task names parse and print") {
  for (auto t : {uda::SslTask::learnable, uda::SslTask::rotate, uda::SslTask::none}) {
    CHECK(uda::parse_ssl_task(uda::to_string(t)) == t);
  }
  CHECK_THROWS_AS(uda::parse_ssl_task("jigsaw"), ConfigError);
}

TEST_CASE("active parameter groups per task") {
  using G = nn::Group;
  CHECK(uda::active_groups(uda::SslTask::learnable) ==
        std::vector<G>{G::encoder, G::main_head, G::recon_head, G::transform});
  CHECK(uda::active_groups(uda::SslTask::rotate) ==
        std::vector<G>{G::encoder, G::main_head, G::rotation_head});
  CHECK(uda::active_groups(uda::SslTask::none) == std::vector<G>{G::encoder, G::main_head});
}

TEST_CASE("batch count drops a trailing batch of one") {
  CHECK(uda::batch_count(32, 16) == 2);
  CHECK(uda::batch_count(33, 16) == 2);
  CHECK(uda::batch_count(34, 16) == 3);
  CHECK(uda::batch_count(1, 16) == 0);
  CHECK(uda::batch_count(5, 16) == 1);
}

TEST_CASE("config validation rejects out-of-range values") {
  auto c = tiny_config(uda::SslTask::learnable);
  CHECK_NOTHROW(c.validate());
  c.alpha = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(uda::SslTask::learnable);
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(uda::SslTask::learnable);
  c.multi_region = false;
  CHECK(c.ssl_options().variants == 1);
}

TEST_CASE("a training step only moves the active groups") {
  for (auto task : {uda::SslTask::learnable, uda::SslTask::rotate, uda::SslTask::none}) {
    CAPTURE(uda::to_string(task));
    const auto cfg = tiny_config(task);
    auto m = uda::initial_model(source(), cfg);
    const auto tgt = data::unlabeled(std::span(target().train).first(4));
    const auto src = std::span(source().train).first(4);
    auto snapshot = [&](nn::Group g) {
      std::vector<ad::Tensor> v;
      const nn::Group gs[] = {g};
      for (auto* p : m.parameters(gs)) v.push_back(p->value);
      return v;
    };
    const nn::Group all[] = {nn::Group::encoder, nn::Group::main_head, nn::Group::recon_head,
                             nn::Group::rotation_head, nn::Group::transform};
    std::vector<std::vector<ad::Tensor>> before;
    for (auto g : all) before.push_back(snapshot(g));
    Rng rng(1);
    const auto stats = uda::train_step(m, src, tgt, cfg, cfg.lr, rng);
    CHECK(std::isfinite(stats.total));
    const auto active = uda::active_groups(task);
    for (std::size_t i = 0; i < 5; ++i) {
      const bool is_active = std::find(active.begin(), active.end(), all[i]) != active.end();
      CHECK((snapshot(all[i]) != before[i]) == is_active);
    }
  }
}

TEST_CASE("train loop refuses labeled target clouds") {
  const auto cfg = tiny_config(uda::SslTask::learnable, 1);
  CHECK_THROWS_AS(uda::train_loop(source(), target().train, cfg), ContractError);
}

TEST_CASE("evaluation report is consistent") {
  auto m = uda::initial_model(source(), tiny_config(uda::SslTask::none));
  const auto r = uda::evaluate(m, source(), "test");
  CHECK(r.total == source().test.size());
  std::size_t trace = 0, all = 0;
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    std::size_t row = 0;
    for (auto v : r.confusion[i]) row += v;
    CHECK(row == r.class_counts[i]);
    trace += r.confusion[i][i];
    all += row;
  }
  CHECK(all == r.total);
  CHECK(r.accuracy == doctest::Approx(double(trace) / double(all)).epsilon(1e-15));
  CHECK(r.class_names == source().class_names);
  CHECK(std::isfinite(r.mean_loss));

  std::vector<PointCloud> unlabeled_clouds = data::unlabeled(source().test);
  CHECK_THROWS_AS(uda::evaluate(m, unlabeled_clouds), LabelError);

  auto other = source();
  other.class_names = {"sphere", "cube", "cone"};
  CHECK_THROWS_AS(uda::evaluate(m, other, "test"), uda::VocabularyError);
}

TEST_CASE("empty classes report no per-class accuracy") {
  auto m = uda::initial_model(source(), tiny_config(uda::SslTask::none));
  std::vector<PointCloud> only0;
  for (const auto& c : source().test) {
    if (*c.label == 0) only0.push_back(c);
  }
  const auto r = uda::evaluate(m, only0);
  CHECK(r.per_class_accuracy[0].has_value());
  CHECK_FALSE(r.per_class_accuracy[1].has_value());
  CHECK_FALSE(r.per_class_accuracy[2].has_value());
}

TEST_CASE("a small source set can be memorised") {
  auto cfg = tiny_config(uda::SslTask::none, 60);
  cfg.augment.rotate = false;
  cfg.augment.jitter = false;
  cfg.early_stop_patience = uda::kNoEarlyStop;
  const auto res = uda::train_loop(source(), {}, cfg);
  auto last = res.last;
  CHECK(uda::evaluate(last, source().train).accuracy == 1.0);
}

TEST_CASE("training is bitwise reproducible and checkpoints evaluate identically") {
  const auto cfg = tiny_config(uda::SslTask::learnable, 2);
  const auto tgt = data::unlabeled(target().train);
  const fs::path dir = fs::temp_directory_path() / ("puda_uda_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  uda::TrainHooks hooks;
  hooks.run_dir = dir;
  auto a = uda::train_loop(source(), tgt, cfg, hooks);
  auto b = uda::train_loop(source(), tgt, cfg);
  CHECK(same_metrics(a.metrics, b.metrics));
  CHECK(state_of(a.best) == state_of(b.best));
  CHECK(state_of(a.last) == state_of(b.last));

  REQUIRE(fs::exists(dir / "best.ckpt"));
  REQUIRE(fs::exists(dir / "final.ckpt"));
  REQUIRE(fs::exists(dir / "metrics.jsonl"));
  auto loaded = nn::load_checkpoint(dir / "best.ckpt");
  const auto ra = uda::evaluate(a.best, target(), "test");
  const auto rb = uda::evaluate(loaded, target(), "test");
  CHECK(uda::to_json(ra) == uda::to_json(rb));
  CHECK(uda::predict(a.best, target().test) == uda::predict(loaded, target().test));

  std::ifstream is(dir / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  CHECK(lines == a.metrics.size());
  fs::remove_all(dir);

  auto other = cfg;
  other.seed = 6;
  CHECK_FALSE(same_metrics(uda::train_loop(source(), tgt, other).metrics, a.metrics));
}

TEST_CASE("metrics record every epoch and selection never uses the target") {
  auto cfg = tiny_config(uda::SslTask::learnable, 4);
  cfg.early_stop_patience = uda::kNoEarlyStop;
  const auto tgt = data::unlabeled(target().train);
  std::size_t calls = 0;
  uda::TrainHooks hooks;
  hooks.report_target = [&](nn::Model&) { return double(++calls % 2); };
  const auto a = uda::train_loop(source(), tgt, cfg, hooks);
  hooks.report_target = [&](nn::Model&) { return 0.25; };
  const auto b = uda::train_loop(source(), tgt, cfg, hooks);
  REQUIRE(a.metrics.size() == 4);
  CHECK(a.best_epoch == b.best_epoch);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].epoch == i);
    CHECK(a.metrics[i].tgt_test_acc.has_value());
    CHECK(a.metrics[i].steps == a.steps_per_epoch);
    CHECK(a.metrics[i].lr <= cfg.lr);
    if (i) CHECK(a.metrics[i].lr <= a.metrics[i - 1].lr);
  }
  const auto& best = a.metrics[a.best_epoch];
  CHECK(best.src_val_acc == a.best_val_acc);
  for (const auto& m : a.metrics) {
    CHECK(m.src_val_acc <= a.best_val_acc);
    if (m.src_val_acc == a.best_val_acc) CHECK(m.src_val_loss >= a.best_val_loss);
  }
}

TEST_CASE("early stopping halts after the patience window") {
  auto cfg = tiny_config(uda::SslTask::none, 50);
  cfg.early_stop_patience = 2;
  const auto r = uda::train_loop(source(), {}, cfg);
  CHECK(r.metrics.size() <= r.best_epoch + 3);
  CHECK(r.metrics.size() >= r.best_epoch + 1);
  if (r.metrics.size() < 50) CHECK(r.metrics.size() == r.best_epoch + 3);
}

TEST_CASE("non-finite losses abort with the last good checkpoint") {
  auto cfg = tiny_config(uda::SslTask::none, 3);
  const fs::path dir = fs::temp_directory_path() / ("puda_nan_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  std::size_t calls = 0;
  uda::TrainHooks hooks;
  hooks.run_dir = dir;
  hooks.source_hook = [&](std::vector<PointCloud>& batch) {
    if (++calls > 3) batch[0].points[0][0] = std::numeric_limits<double>::quiet_NaN();
  };
  try {
    uda::train_loop(source(), {}, cfg, hooks);
    FAIL("expected a numeric abort");
  } catch (const uda::NumericAbort& e) {
    CHECK(e.last_good_checkpoint == dir / "best.ckpt");
    CHECK(fs::exists(e.last_good_checkpoint));
  }
  fs::remove_all(dir);
}

TEST_CASE("vocabularies of source and target must match") {
  auto other = target();
  other.class_names = {"a", "b", "c"};
  CHECK_THROWS_AS(uda::run_adaptation(source(), other, tiny_config(uda::SslTask::learnable, 1)),
                  uda::VocabularyError);
}

TEST_CASE("augmentation mode with alpha zero equals the source-only baseline") {
  auto cfg = tiny_config(uda::SslTask::learnable, 2);
  cfg.alpha = 0.0;
  cfg.aug_mode = true;
  cfg.aug_probability = 1.0;
  const auto aug = uda::augmentation_mode_train(source(), target(), cfg);
  const auto base = uda::run_no_adapt_baseline(source(), target(), cfg);
  CHECK(same_metrics(aug.phase2.train.metrics, base.train.metrics));
  // Only the transformation weights may differ: phase 2 carries phase 1's.
  auto without_transform = [](nn::Model m) {
    auto s = state_of(m);
    std::erase_if(s, [](const auto& e) { return e.first.rfind("transform", 0) == 0; });
    return s;
  };
  const auto a = without_transform(aug.phase2.train.best);
  CHECK(a == without_transform(base.train.best));
  auto full = base.train.best;
  CHECK(a.size() < state_of(full).size());
}

TEST_CASE("augmentation mode keeps the learned transformation frozen") {
  auto cfg = tiny_config(uda::SslTask::learnable, 2);
  cfg.aug_mode = true;
  auto res = uda::augmentation_mode_train(source(), target(), cfg);
  const nn::Group g[] = {nn::Group::transform};
  auto phase1 = res.transform_model.parameters(g);
  auto phase2 = res.phase2.train.last.parameters(g);
  REQUIRE(phase1.size() == phase2.size());
  for (std::size_t i = 0; i < phase1.size(); ++i) CHECK(phase1[i]->value == phase2[i]->value);
  CHECK(res.phase1.size() == 2);
}

TEST_CASE("destroy_with moves only the selected region") {
  nn::Model m(check::tiny_network(), 3);
  Rng rng(4);
  const auto c = check::random_cloud(20, rng);
  RegionMask mask;
  const auto d = uda::destroy_with(m, c, 0.5, 0.25, rng, &mask);
  CHECK(mask.k == 5);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!mask.selected[i]) CHECK(d.points[i] == c.points[i]);
  }
  CHECK(uda::destroy_with(m, c, 0.0, 0.25, rng) == c);
}

TEST_CASE("adaptation between identical domains matches the source accuracy") {
  auto cfg = tiny_config(uda::SslTask::learnable, 8);
  cfg.early_stop_patience = uda::kNoEarlyStop;
  auto same = source();
  auto r = uda::run_adaptation(source(), same, cfg);
  const auto on_source = uda::evaluate(r.train.best, source(), "test");
  CHECK(std::abs(r.target_test.accuracy - on_source.accuracy) <= 0.05);
}
