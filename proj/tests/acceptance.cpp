// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are
// pinned here; the UDA fixture file holds the measured reference means.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "puda/config.hpp"
#include "puda/optim.hpp"
#include "puda/runinfo.hpp"
#include "puda/selfcheck.hpp"
#include "puda/uda.hpp"

using namespace puda;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-3;
constexpr std::size_t kGradSeeds = 20;
// Coordinates near a kink are skipped; a check that skips more than this
// share of its coordinates has not tested enough to pass.
constexpr double kMaxKinkExcluded = 0.25;
constexpr std::size_t kChamferPairs = 1000;
constexpr std::size_t kChamferMaxN = 256;
constexpr double kChamferTolerance = 1e-12;
constexpr std::size_t kInvariantTrials = 100;
constexpr double kInvariantTolerance = 1e-9;
constexpr std::size_t kTransformSteps = 100;
constexpr std::size_t kReconSteps = 200;
constexpr std::size_t kDirectionBatch = 8;
constexpr double kTiePoints = 0.01;
constexpr double kFixturePoints = 0.02;
constexpr std::size_t kUdaEpochs = 30;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

const fs::path kRoot = PUDA_SOURCE_DIR;

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Verdict> g_verdicts;

void report(const std::string& name, bool pass, const std::string& detail) {
  g_verdicts.push_back({name, pass, detail});
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

uda::TrainConfig default_config() {
  auto c = config::train_schema();
  c.load(kRoot / "configs" / "default.conf");
  return config::to_train_config(c);
}

std::pair<data::DomainDataset, data::DomainDataset> benchmark_domains() {
  auto g = config::gen_schema();
  g.load(kRoot / "configs" / "gen_default.conf");
  const auto [s, t] = config::to_gen_specs(g);
  return {data::gen_synthetic_domain(s), data::gen_synthetic_domain(t)};
}

// ---------------------------------------------------------------------------

void gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::size_t failed = 0, cases = 0, probes = 0, excluded = 0;
  for (const auto& c : check::gradient_cases()) {
    ++cases;
    double case_worst = 0.0;
    std::size_t case_probes = 0, case_excluded = 0;
    for (std::size_t s = 0; s < kGradSeeds; ++s) {
      const auto r = c.run(1000 + s);
      case_worst = std::max(case_worst, r.max_rel_error);
      case_probes += r.probes;
      case_excluded += r.excluded;
    }
    const double share =
        static_cast<double>(case_excluded) / static_cast<double>(case_probes + case_excluded);
    if (!(case_worst < kGradTolerance) || share > kMaxKinkExcluded) ++failed;
    if (case_worst > worst) worst = case_worst, worst_case = c.name;
    probes += case_probes;
    excluded += case_excluded;
    std::printf("  %-40s worst rel err %.3e over %zu seeds, %zu probes, %zu near a kink\n",
                c.name.c_str(), case_worst, kGradSeeds, case_probes, case_excluded);
  }
  report("gradient correctness", failed == 0,
         fmt("%zu ops/losses x %zu seeds, worst %.3e (%s), tol %.0e, %zu probes, %zu skipped "
             "within 1e-3 of a kink (max share %.2f), %.1fs",
             cases, kGradSeeds, worst, worst_case.c_str(), kGradTolerance, probes, excluded,
             kMaxKinkExcluded, seconds_since(t0)));
}

void chamfer() {
  const auto t0 = std::chrono::steady_clock::now();
  const double gap = check::chamfer_oracle_gap(kChamferPairs, 77, kChamferMaxN);
  Rng rng(78);
  double self = 0.0, perm = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto a = check::random_cloud(1 + rng.index(kChamferMaxN), rng);
    const auto b = check::random_cloud(1 + rng.index(kChamferMaxN), rng);
    auto p = a;
    rng.shuffle(p.points);
    self = std::max(self, std::abs(chamfer_distance(a, a)));
    perm = std::max(perm, std::abs(chamfer_distance(a, b) - chamfer_distance(p, b)));
  }
  report("chamfer oracle", gap <= kChamferTolerance && self == 0.0 && perm < kChamferTolerance,
         fmt("%zu pairs n<=%zu worst rel gap %.2e; max CD(X,X) %.1e; permutation shift %.2e; "
             "%.1fs",
             kChamferPairs, kChamferMaxN, gap, self, perm, seconds_since(t0)));
}

void invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  // Full-size network: the architecture under test, not a reduced copy.
  nn::NetworkConfig net;
  net.num_classes = 8;
  net.recon_points = 256;
  double enc = 0.0, tr = 0.0;
  std::size_t ok_enc = 0, ok_tr = 0, ok_alpha = 0, ok_mask = 0;
  for (std::size_t s = 0; s < kInvariantTrials; ++s) {
    const double e = check::encoder_permutation_gap(s, net);
    const double t = check::transform_permutation_gap(s, net);
    enc = std::max(enc, e);
    tr = std::max(tr, t);
    ok_enc += e <= kInvariantTolerance;
    ok_tr += t <= kInvariantTolerance;
    ok_alpha += check::alpha_zero_is_identity(s, net);
    ok_mask += check::unmasked_points_preserved(s, net);
  }
  const std::size_t n = kInvariantTrials;
  report("architecture invariants", ok_enc == n && ok_tr == n && ok_alpha == n && ok_mask == n,
         fmt("encoder invariance %zu/%zu (worst %.1e), transform equivariance %zu/%zu (worst "
             "%.1e), alpha=0 identity %zu/%zu, unmasked preserved %zu/%zu; %.1fs",
             ok_enc, n, enc, ok_tr, n, tr, ok_alpha, n, ok_mask, n, seconds_since(t0)));
}

// Mean CD(x', x) and CD(x_hat, x) on a fixed batch with fixed regions.
std::pair<double, double> probe_cds(nn::Model& m, std::span<const PointCloud> batch,
                                    const ssl::SslOptions& o) {
  ad::Tape tape;
  Rng rng(4242);
  const auto items =
      ssl::build_ssl_batch(tape, m, batch, o, rng, ad::Mode::train_fixed_stats);
  const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train_fixed_stats);
  return {parts.adv() / o.lambda2, parts.recon() / o.lambda1};
}

void adversarial_direction(const data::DomainDataset& source) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = default_config();
  const auto o = cfg.ssl_options();
  std::size_t up = 0, down = 0;
  std::string detail;
  for (auto seed : kSeeds) {
    auto m = uda::initial_model(source, cfg);
    Rng pick(seed);
    auto pool = source.train;
    pick.shuffle(pool);
    pool.resize(kDirectionBatch);

    // Transformation-only steps on the joint objective.
    const nn::Group tg[] = {nn::Group::transform};
    const auto tparams = m.parameters(tg);
    const double adv0 = probe_cds(m, pool, o).first;
    Rng rng(seed * 7 + 1);
    for (std::size_t step = 0; step < kTransformSteps; ++step) {
      ad::Tape tape;
      const auto items = ssl::build_ssl_batch(tape, m, pool, o, rng, ad::Mode::train);
      const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train_fixed_stats);
      ad::zero_grads(tparams);
      tape.backward(parts.total);
      ad::adam_step(tparams, cfg.lr, {.weight_decay = cfg.weight_decay});
    }
    const double adv1 = probe_cds(m, pool, o).first;

    // Reconstruction-only steps with omega frozen.
    m.transform.set_frozen(true);
    const nn::Group rg[] = {nn::Group::encoder, nn::Group::recon_head};
    const auto rparams = m.parameters(rg);
    const double rec0 = probe_cds(m, pool, o).second;
    for (std::size_t step = 0; step < kReconSteps; ++step) {
      ad::Tape tape;
      const auto items = ssl::build_ssl_batch(tape, m, pool, o, rng, ad::Mode::train);
      const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train);
      ad::zero_grads(rparams);
      tape.backward(parts.total);
      ad::adam_step(rparams, cfg.lr, {.weight_decay = cfg.weight_decay});
    }
    const double rec1 = probe_cds(m, pool, o).second;
    up += adv1 > adv0;
    down += rec1 < rec0;
    detail += fmt("seed %llu: CD(x',x) %.4f->%.4f, CD(x^,x) %.4f->%.4f; ",
                  static_cast<unsigned long long>(seed), adv0, adv1, rec0, rec1);
  }
  report("adversarial directionality", up == kSeeds.size() && down == kSeeds.size(),
         detail + fmt("%zu/%zu up, %zu/%zu down, %.1fs", up, kSeeds.size(), down, kSeeds.size(),
                      seconds_since(t0)));
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void reproducibility(const data::DomainDataset& source, const data::DomainDataset& target) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = default_config();
  cfg.epochs = 1;
  cfg.seed = 9;
  const fs::path base =
      fs::temp_directory_path() / ("puda_accept_" + std::to_string(::getpid()));
  fs::remove_all(base);
  std::vector<std::string> streams;
  std::vector<uda::AdaptationResult> results;
  for (int run = 0; run < 2; ++run) {
    uda::TrainHooks hooks;
    hooks.run_dir = base / std::to_string(run);
    results.push_back(uda::run_adaptation(source, target, cfg, hooks));
  }
  const bool metrics_same =
      file_bytes(base / "0" / "metrics.jsonl") == file_bytes(base / "1" / "metrics.jsonl") &&
      !file_bytes(base / "0" / "metrics.jsonl").empty();
  const bool ckpt_same =
      file_bytes(base / "0" / "best.ckpt") == file_bytes(base / "1" / "best.ckpt") &&
      file_bytes(base / "0" / "final.ckpt") == file_bytes(base / "1" / "final.ckpt");
  auto loaded = nn::load_checkpoint(base / "0" / "best.ckpt");
  const auto direct = uda::to_json(results[0].target_test);
  const auto reloaded = uda::to_json(uda::evaluate(loaded, target, "test"));
  const bool eval_same = direct == reloaded;
  fs::remove_all(base);
  report("reproducibility", metrics_same && ckpt_same && eval_same,
         fmt("metrics stream identical: %s, checkpoints identical: %s, reloaded evaluation "
             "identical: %s; %.1fs",
             metrics_same ? "yes" : "no", ckpt_same ? "yes" : "no", eval_same ? "yes" : "no",
             seconds_since(t0)));
}

void default_config_check() {
  const auto c = default_config();
  const bool ok = c.alpha == 0.05 && c.lambda1 == 1.0 && c.lambda2 == 10.0 && c.variants == 2 &&
                  c.multi_region && c.batch_size == 16 && c.lr == 0.001 &&
                  c.weight_decay == 0.0005 && c.epochs == 150 && c.augment.jitter_sigma == 0.01 &&
                  c.augment.jitter_clip == 0.02 && c.crop_retain == 0.7;
  report("default config", ok,
         fmt("alpha %g, lambda1 %g, lambda2 %g, M %zu, batch %zu, lr %g, wd %g, epochs %zu, "
             "jitter (%g, %g), crop retain %g",
             c.alpha, c.lambda1, c.lambda2, c.variants, c.batch_size, c.lr, c.weight_decay,
             c.epochs, c.augment.jitter_sigma, c.augment.jitter_clip, c.crop_retain));
}

// ---------------------------------------------------------------------------
// UDA suite

struct Run {
  std::string method;
  std::uint64_t seed = 0;
  double target_acc = 0.0;
  double source_val = 0.0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

const std::vector<std::string> kMethods{"learnable_multi", "learnable_single", "none", "aug"};

Run run_method(const std::string& method, std::uint64_t seed, const data::DomainDataset& source,
               const data::DomainDataset& target, std::size_t epochs) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = default_config();
  cfg.epochs = epochs;
  cfg.seed = seed;
  uda::AdaptationResult r;
  if (method == "learnable_multi") {
    r = uda::run_adaptation(source, target, cfg);
  } else if (method == "learnable_single") {
    cfg.multi_region = false;
    r = uda::run_adaptation(source, target, cfg);
  } else if (method == "none") {
    r = uda::run_no_adapt_baseline(source, target, cfg);
  } else {
    cfg.aug_mode = true;
    r = uda::augmentation_mode_train(source, target, cfg).phase2;
  }
  return {method,        seed, r.target_test.accuracy, r.source_val.accuracy, r.train.best_epoch,
          seconds_since(t0)};
}

std::vector<Run> run_all(const data::DomainDataset& source, const data::DomainDataset& target,
                         std::size_t epochs, std::size_t jobs) {
  std::vector<std::pair<std::string, std::uint64_t>> work;
  for (auto seed : kSeeds) {
    for (const auto& m : kMethods) work.emplace_back(m, seed);
  }
  std::vector<Run> runs(work.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < work.size();) {
      runs[i] = run_method(work[i].first, work[i].second, source, target, epochs);
      std::lock_guard lock(io);
      std::printf("  %-17s seed %llu: target %.4f  source val %.4f  best epoch %zu  (%.0fs)\n",
                  runs[i].method.c_str(), static_cast<unsigned long long>(runs[i].seed),
                  runs[i].target_acc, runs[i].source_val, runs[i].best_epoch, runs[i].seconds);
      std::fflush(stdout);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return runs;
}

std::map<std::string, double> means_of(const std::vector<Run>& runs) {
  std::map<std::string, double> sum;
  std::map<std::string, double> n;
  for (const auto& r : runs) {
    sum[r.method] += r.target_acc;
    n[r.method] += 1.0;
  }
  for (auto& [k, v] : sum) v /= n[k];
  return sum;
}

void uda_suite(const data::DomainDataset& source, const data::DomainDataset& target,
               const fs::path& fixture, bool record, const fs::path& results_out) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  std::printf("  UDA suite: %zu methods x %zu seeds, %zu epochs, %zu worker(s)\n",
              kMethods.size(), kSeeds.size(), kUdaEpochs, jobs);
  const auto runs = run_all(source, target, kUdaEpochs, jobs);
  const auto mean = means_of(runs);
  const double minutes = seconds_since(t0) / 60.0;

  report("UDA direction: learnable multi-region beats no adaptation",
         mean.at("learnable_multi") > mean.at("none"),
         fmt("mean target accuracy %.4f vs %.4f over %zu seeds (%.1f min suite)",
             mean.at("learnable_multi"), mean.at("none"), kSeeds.size(), minutes));
  report("UDA direction: multi-region >= single-region",
         mean.at("learnable_multi") >= mean.at("learnable_single") - kTiePoints,
         fmt("%.4f vs %.4f, tie tolerance %.2f", mean.at("learnable_multi"),
             mean.at("learnable_single"), kTiePoints));
  report("augmentation mode: full adaptation >= augmentation only",
         mean.at("learnable_multi") >= mean.at("aug") - kTiePoints,
         fmt("%.4f vs %.4f, tie tolerance %.2f", mean.at("learnable_multi"), mean.at("aug"),
             kTiePoints));

  json out;
  out["epochs"] = kUdaEpochs;
  out["seeds"] = kSeeds;
  out["means"] = mean;
  for (const auto& r : runs) {
    out["runs"].push_back({{"method", r.method},
                           {"seed", r.seed},
                           {"target_accuracy", r.target_acc},
                           {"source_val_accuracy", r.source_val},
                           {"best_epoch", r.best_epoch},
                           {"seconds", r.seconds}});
  }
  out["environment"] = json::parse(runinfo::environment_stamp());
  if (!results_out.empty()) std::ofstream(results_out) << out.dump(2) << "\n";

  if (record) {
    json fx;
    fx["epochs"] = kUdaEpochs;
    fx["seeds"] = kSeeds;
    fx["means"] = mean;
    fx["tolerance"] = kFixturePoints;
    std::ofstream(fixture) << fx.dump(2) << "\n";
    std::printf("  recorded fixture %s\n", fixture.c_str());
  }
  std::ifstream is(fixture);
  if (!is) {
    report("UDA regression fixtures", false, "missing fixture file " + fixture.string());
    return;
  }
  const auto fx = json::parse(is);
  std::size_t bad = 0;
  std::string detail;
  for (const auto& m : kMethods) {
    const double want = fx.at("means").at(m).get<double>();
    const double got = mean.at(m);
    bad += std::abs(got - want) > kFixturePoints;
    detail += fmt("%s %.4f (fixture %.4f); ", m.c_str(), got, want);
  }
  report("UDA regression fixtures", bad == 0,
         detail + fmt("tolerance +-%.2f", kFixturePoints) +
             (record ? " (fixture recorded by this run)" : ""));
}

}  // namespace

int main(int argc, char** argv) {
  runinfo::configure_allocator();
  CLI::App app{"Acceptance criteria"};
  std::string suite = "all";
  std::string fixture = (kRoot / "tests" / "fixtures" / "uda_reference.json").string();
  std::string results;
  bool record = false;
  app.add_option("--suite", suite, "all, quick (everything but the UDA runs) or uda")
      ->check(CLI::IsMember({"all", "quick", "uda"}));
  app.add_option("--fixture", fixture, "UDA reference means");
  app.add_flag("--record-fixture", record, "Overwrite the fixture with this run's means");
  app.add_option("--results", results, "Write per-run UDA results as JSON");
  CLI11_PARSE(app, argc, argv);

  const auto t0 = std::chrono::steady_clock::now();
  const auto [source, target] = benchmark_domains();
  if (suite != "uda") {
    gradients();
    chamfer();
    invariants();
    adversarial_direction(source);
    reproducibility(source, target);
    default_config_check();
  }
  if (suite != "quick") uda_suite(source, target, fixture, record, results);

  const auto failed = std::count_if(g_verdicts.begin(), g_verdicts.end(),
                                    [](const Verdict& v) { return !v.pass; });
  std::printf("%zu criteria, %td failed, %.1f min\n", g_verdicts.size(), failed,
              seconds_since(t0) / 60.0);
  return failed == 0 ? 0 : 1;
}
