#include "puda/uda.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "puda/optim.hpp"

namespace puda::uda {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SslTask t) {
  switch (t) {
    case SslTask::learnable: return "learnable";
    case SslTask::rotate: return "rotate";
    case SslTask::none: return "none";
  }
  return "?";
}

SslTask parse_ssl_task(const std::string& s) {
  if (s == "learnable") return SslTask::learnable;
  if (s == "rotate") return SslTask::rotate;
  if (s == "none") return SslTask::none;
  throw ConfigError("unknown ssl task '" + s + "' (expected learnable, rotate or none)");
}

ssl::SslOptions TrainConfig::ssl_options() const {
  ssl::SslOptions o;
  o.variants = multi_region ? variants : 1;
  o.region_fraction = region_fraction;
  o.alpha = alpha;
  o.lambda1 = lambda1;
  o.lambda2 = lambda2;
  o.detach_recon_from_transform = detach_recon_from_transform;
  return o;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be positive");
  if (aux_weight < 0.0) throw ConfigError("train.aux_weight must be non-negative");
  if (alpha < 0.0) throw ConfigError("ssl.alpha must be non-negative");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("ssl.lambda1/lambda2 must be non-negative");
  if (variants < 1) throw ConfigError("ssl.variants must be positive");
  if (!(region_fraction > 0.0 && region_fraction <= 1.0)) {
    throw ConfigError("ssl.region_fraction must lie in (0,1]");
  }
  if (!(crop_retain > 0.0 && crop_retain <= 1.0)) throw ConfigError("crop.retain must lie in (0,1]");
  if (aug_probability < 0.0 || aug_probability > 1.0) {
    throw ConfigError("aug_mode.probability must lie in [0,1]");
  }
  if (augment.jitter_sigma < 0.0 || augment.jitter_clip < 0.0) {
    throw ConfigError("augment.jitter_sigma/jitter_clip must be non-negative");
  }
  if (eval_batch < 1) throw ConfigError("train.eval_batch must be positive");
}

std::string to_json_line(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["main_loss"] = m.main_loss;
  j["ssl_recon_src"] = m.ssl_recon_src;
  j["ssl_recon_tgt"] = m.ssl_recon_tgt;
  j["ssl_adv_src"] = m.ssl_adv_src;
  j["ssl_adv_tgt"] = m.ssl_adv_tgt;
  j["src_val_acc"] = m.src_val_acc;
  j["src_val_loss"] = m.src_val_loss;
  j["tgt_test_acc"] = m.tgt_test_acc ? json(*m.tgt_test_acc) : json(nullptr);
  j["lr"] = m.lr;
  j["steps"] = m.steps;
  return j.dump();
}

std::vector<nn::Group> active_groups(SslTask task) {
  using G = nn::Group;
  switch (task) {
    case SslTask::learnable: return {G::encoder, G::main_head, G::recon_head, G::transform};
    case SslTask::rotate: return {G::encoder, G::main_head, G::rotation_head};
    case SslTask::none: return {G::encoder, G::main_head};
  }
  return {};
}

std::size_t batch_count(std::size_t n, std::size_t batch_size) {
  return n / batch_size + (n % batch_size >= 2 ? 1 : 0);
}

namespace {

std::vector<int> labels_of(std::span<const PointCloud> clouds) {
  std::vector<int> y;
  y.reserve(clouds.size());
  for (const auto& c : clouds) {
    if (!c.label) throw std::invalid_argument("source batch contains an unlabeled cloud");
    y.push_back(*c.label);
  }
  return y;
}

ad::Var encode_batch(nn::Model& model, ad::Tape& tape, std::span<const PointCloud> clouds,
                     ad::Mode mode) {
  const auto batch = nn::CloudBatch::from(clouds);
  return model.encoder.forward(tape, tape.constant(batch.points), batch.offsets, mode);
}

}  // namespace

StepStats train_step(nn::Model& model, std::span<const PointCloud> source_batch,
                     std::span<const PointCloud> target_batch, const TrainConfig& cfg,
                     double lr, Rng& rng, const SourceHook& source_hook) {
  if (source_batch.empty()) throw std::invalid_argument("train_step: empty source batch");
  if (cfg.ssl_task != SslTask::none && target_batch.empty()) {
    throw std::invalid_argument("train_step: empty target batch");
  }

  std::vector<PointCloud> src;
  src.reserve(source_batch.size());
  for (const auto& c : source_batch) {
    auto a = augment(c, rng, cfg.augment);
    if (cfg.crop_source) a = random_plane_crop(a, cfg.crop_retain, rng);
    src.push_back(std::move(a));
  }
  if (source_hook) source_hook(src);
  std::vector<PointCloud> tgt;
  if (cfg.ssl_task != SslTask::none) {
    for (const auto& c : target_batch) tgt.push_back(augment(c, rng, cfg.augment));
  }

  ad::Tape tape;
  StepStats st;
  const auto labels = labels_of(src);
  auto logits = nn::classify_head(model, tape, encode_batch(model, tape, src, ad::Mode::train),
                                  ad::Mode::train);
  auto main = ad::softmax_cross_entropy(logits, labels);
  st.main = main.value().item();
  std::vector<ad::Var> terms{main};
  // Encoder passes of the auxiliary task; see TrainConfig::aux_updates_bn_stats.
  const auto aux_mode = cfg.aux_updates_bn_stats ? ad::Mode::train : ad::Mode::train_fixed_stats;

  if (cfg.ssl_task == SslTask::learnable) {
    const auto opts = cfg.ssl_options();
    auto items_s = ssl::build_ssl_batch(tape, model, src, opts, rng, ad::Mode::train,
                                        ssl::Domain::source);
    auto parts_s = ssl::ssl_loss(tape, model, items_s, opts, aux_mode);
    auto items_t = ssl::build_ssl_batch(tape, model, tgt, opts, rng, ad::Mode::train,
                                        ssl::Domain::target);
    auto parts_t = ssl::ssl_loss(tape, model, items_t, opts, aux_mode);
    st.recon_src = parts_s.recon();
    st.adv_src = parts_s.adv();
    st.recon_tgt = parts_t.recon();
    st.adv_tgt = parts_t.adv();
    terms.push_back(ad::scale(parts_s.total, cfg.aux_weight));
    terms.push_back(ad::scale(parts_t.total, cfg.aux_weight));
  } else if (cfg.ssl_task == SslTask::rotate) {
    for (auto* domain : {&src, &tgt}) {
      std::vector<PointCloud> rotated;
      std::vector<int> rot_labels;
      for (const auto& c : *domain) {
        auto [r, y] = ssl::rotation_task(c, rng);
        rotated.push_back(std::move(r));
        rot_labels.push_back(y);
      }
      auto rl = nn::rotation_head(model, tape, encode_batch(model, tape, rotated, aux_mode),
                                  aux_mode);
      auto loss = ssl::rotation_loss(rl, rot_labels);
      (domain == &src ? st.recon_src : st.recon_tgt) = loss.value().item();
      terms.push_back(ad::scale(loss, cfg.aux_weight));
    }
  }

  auto total = ad::add_n(terms);
  st.total = total.value().item();
  if (!std::isfinite(st.total)) throw NumericError("non-finite training loss");

  const auto groups = active_groups(cfg.ssl_task);
  auto params = model.parameters(groups);
  ad::zero_grads(params);
  tape.backward(total);
  ad::adam_step(params, lr, {.weight_decay = cfg.weight_decay});
  return st;
}

nn::Model initial_model(const data::DomainDataset& source, const TrainConfig& cfg) {
  nn::NetworkConfig net = cfg.network;
  net.num_classes = source.class_names.size();
  net.recon_points = source.nominal_n;
  nn::Model model(net, cfg.seed);
  model.class_names = source.class_names;
  return model;
}

TrainResult train_loop(const data::DomainDataset& source,
                       std::span<const PointCloud> target_unlabeled, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  return train_loop(initial_model(source, cfg), source, target_unlabeled, cfg, hooks);
}

TrainResult train_loop(nn::Model model, const data::DomainDataset& source,
                       std::span<const PointCloud> target_unlabeled, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  cfg.validate();
  if (source.train.empty() || source.val.empty()) {
    throw std::invalid_argument("train_loop: source needs non-empty train and val splits");
  }
  const bool uses_target = cfg.ssl_task != SslTask::none;
  if (uses_target && target_unlabeled.empty()) {
    throw std::invalid_argument("train_loop: target split is empty");
  }
  for (const auto& c : target_unlabeled) {
    if (c.label) throw ContractError("train_loop: target clouds must be passed without labels");
  }

  const std::size_t steps =
      uses_target ? std::min(batch_count(source.train.size(), cfg.batch_size),
                             batch_count(target_unlabeled.size(), cfg.batch_size))
                  : batch_count(source.train.size(), cfg.batch_size);
  if (steps == 0) throw std::invalid_argument("train_loop: not enough clouds for one batch");

  Rng rng = Rng(cfg.seed).child(11);
  TrainResult result;
  result.steps_per_epoch = steps;

  std::ofstream metrics_out;
  fs::path best_path, final_path;
  if (!hooks.run_dir.empty()) {
    fs::create_directories(hooks.run_dir);
    metrics_out.open(hooks.run_dir / "metrics.jsonl", std::ios::trunc);
    best_path = hooks.run_dir / "best.ckpt";
    final_path = hooks.run_dir / "final.ckpt";
  }

  std::size_t since_best = 0;
  std::vector<std::size_t> src_order(source.train.size()), tgt_order(target_unlabeled.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = ad::cosine_lr(static_cast<long>(epoch), static_cast<long>(cfg.epochs), cfg.lr);
    std::iota(src_order.begin(), src_order.end(), 0);
    std::iota(tgt_order.begin(), tgt_order.end(), 0);
    rng.shuffle(src_order);
    if (uses_target) rng.shuffle(tgt_order);

    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<PointCloud> sb, tb;
      for (std::size_t i = s * cfg.batch_size;
           i < std::min((s + 1) * cfg.batch_size, src_order.size()); ++i) {
        sb.push_back(source.train[src_order[i]]);
      }
      if (uses_target) {
        for (std::size_t i = s * cfg.batch_size;
             i < std::min((s + 1) * cfg.batch_size, tgt_order.size()); ++i) {
          tb.push_back(target_unlabeled[tgt_order[i]]);
        }
      }
      StepStats st;
      try {
        st = train_step(model, sb, tb, cfg, m.lr, rng, hooks.source_hook);
      } catch (const NumericError& e) {
        throw NumericAbort(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(s),
                           result.best_val_acc >= 0.0 ? best_path : fs::path{});
      }
      m.main_loss += st.main;
      m.ssl_recon_src += st.recon_src;
      m.ssl_adv_src += st.adv_src;
      m.ssl_recon_tgt += st.recon_tgt;
      m.ssl_adv_tgt += st.adv_tgt;
      ++result.total_steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    m.main_loss *= inv;
    m.ssl_recon_src *= inv;
    m.ssl_adv_src *= inv;
    m.ssl_recon_tgt *= inv;
    m.ssl_adv_tgt *= inv;
    m.steps = steps;

    const auto val = evaluate(model, source.val, cfg.eval_batch);
    m.src_val_acc = val.accuracy;
    m.src_val_loss = val.mean_loss;
    if (hooks.report_target) m.tgt_test_acc = hooks.report_target(model);

    // Higher accuracy wins; equal accuracy is broken by lower loss, since a
    // small validation split saturates long before training converges.
    const bool better =
        m.src_val_acc > result.best_val_acc ||
        (m.src_val_acc == result.best_val_acc && m.src_val_loss < result.best_val_loss);
    if (better) {
      result.best_val_acc = m.src_val_acc;
      result.best_val_loss = m.src_val_loss;
      result.best_epoch = epoch;
      result.best = model;
      since_best = 0;
      if (!best_path.empty()) nn::save_checkpoint(best_path, model);
    } else {
      ++since_best;
    }
    result.metrics.push_back(m);
    if (metrics_out.is_open()) metrics_out << to_json_line(m) << "\n" << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (cfg.early_stop_patience != kNoEarlyStop && since_best >= cfg.early_stop_patience) break;
  }
  result.last = std::move(model);
  if (!final_path.empty()) nn::save_checkpoint(final_path, result.last);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

// Eval-mode logits, one row per cloud.
std::vector<std::vector<double>> logits_for(nn::Model& model, std::span<const PointCloud> clouds,
                                            std::size_t batch) {
  std::vector<std::vector<double>> out;
  out.reserve(clouds.size());
  for (std::size_t lo = 0; lo < clouds.size(); lo += batch) {
    const std::size_t hi = std::min(lo + batch, clouds.size());
    ad::Tape tape;
    auto logits = nn::classify_head(
        model, tape, encode_batch(model, tape, clouds.subspan(lo, hi - lo), ad::Mode::eval),
        ad::Mode::eval);
    const auto& l = logits.value();
    for (std::size_t i = 0; i < l.dim(0); ++i) {
      out.emplace_back(l.data() + i * l.dim(1), l.data() + (i + 1) * l.dim(1));
    }
  }
  return out;
}

int argmax(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

double cross_entropy(const std::vector<double>& row, int label) {
  const double m = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - m);
  return m + std::log(z) - row[static_cast<std::size_t>(label)];
}

}  // namespace

std::vector<int> predict(nn::Model& model, std::span<const PointCloud> clouds, std::size_t batch) {
  std::vector<int> out;
  for (const auto& row : logits_for(model, clouds, batch)) out.push_back(argmax(row));
  return out;
}

EvalReport evaluate(nn::Model& model, std::span<const PointCloud> labeled, std::size_t batch) {
  const std::size_t classes = model.config.num_classes;
  EvalReport r;
  r.class_names = model.class_names;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  r.class_counts.assign(classes, 0);
  if (labeled.empty()) throw std::invalid_argument("evaluate: empty split");
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto& y = labeled[i].label;
    if (!y || *y < 0 || static_cast<std::size_t>(*y) >= classes) {
      throw LabelError("evaluate: cloud " + std::to_string(i) + " has no valid label");
    }
  }
  const auto logits = logits_for(model, labeled, batch);
  std::vector<int> pred;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    pred.push_back(argmax(logits[i]));
    loss += cross_entropy(logits[i], *labeled[i].label);
  }
  r.mean_loss = loss / static_cast<double>(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto t = static_cast<std::size_t>(*labeled[i].label);
    ++r.confusion[t][static_cast<std::size_t>(pred[i])];
    ++r.class_counts[t];
    if (pred[i] == *labeled[i].label) ++correct;
  }
  r.total = labeled.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.class_counts[c] == 0) {
      r.per_class_accuracy.emplace_back();
    } else {
      r.per_class_accuracy.emplace_back(static_cast<double>(r.confusion[c][c]) /
                                        static_cast<double>(r.class_counts[c]));
    }
  }
  return r;
}

EvalReport evaluate(nn::Model& model, const data::DomainDataset& ds, const std::string& split,
                    std::size_t batch) {
  if (ds.class_names != model.class_names) {
    throw VocabularyError("dataset '" + ds.name + "' class vocabulary does not match the model's");
  }
  return evaluate(model, ds.split(split), batch);
}

std::string to_json(const EvalReport& r) {
  json j;
  j["accuracy"] = r.accuracy;
  j["mean_loss"] = r.mean_loss;
  j["total"] = r.total;
  j["class_names"] = r.class_names;
  json per = json::array();
  for (const auto& a : r.per_class_accuracy) per.push_back(a ? json(*a) : json(nullptr));
  j["per_class_accuracy"] = per;
  j["class_counts"] = r.class_counts;
  j["confusion"] = r.confusion;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Runs

namespace {

AdaptationResult run_from(nn::Model initial, const data::DomainDataset& source,
                          const data::DomainDataset& target, const TrainConfig& cfg,
                          TrainHooks hooks) {
  if (source.class_names != target.class_names) {
    throw VocabularyError("source and target class vocabularies differ");
  }
  if (!hooks.report_target && !target.test.empty()) {
    hooks.report_target = [&target, &cfg](nn::Model& m) {
      return evaluate(m, target.test, cfg.eval_batch).accuracy;
    };
  }
  const auto target_train = data::unlabeled(target.train);
  AdaptationResult r;
  r.train = train_loop(std::move(initial), source, target_train, cfg, hooks);
  r.source_val = evaluate(r.train.best, source.val, cfg.eval_batch);
  r.target_test = evaluate(r.train.best, target.test, cfg.eval_batch);
  return r;
}

}  // namespace

AdaptationResult run_adaptation(const data::DomainDataset& source,
                                const data::DomainDataset& target, const TrainConfig& cfg,
                                TrainHooks hooks) {
  return run_from(initial_model(source, cfg), source, target, cfg, std::move(hooks));
}

AdaptationResult run_no_adapt_baseline(const data::DomainDataset& source,
                                       const data::DomainDataset& target, TrainConfig cfg,
                                       TrainHooks hooks) {
  cfg.ssl_task = SslTask::none;
  return run_adaptation(source, target, cfg, std::move(hooks));
}

PointCloud destroy_with(nn::Model& model, const PointCloud& cloud, double alpha,
                        double region_fraction, Rng& rng, RegionMask* mask_out) {
  const auto mask = select_region(cloud, ssl::region_size(region_fraction, cloud.size()), rng);
  const auto d = nn::displacements(model, cloud, ad::Mode::eval);
  ad::Tape tape;
  auto x = nn::apply_destruction(tape.constant(to_tensor(cloud)), mask,
                                 tape.constant(to_tensor(d)), alpha);
  if (mask_out) *mask_out = mask;
  return from_tensor(x.value(), cloud.label);
}

AugmentationResult augmentation_mode_train(const data::DomainDataset& source,
                                           const data::DomainDataset& target,
                                           const TrainConfig& cfg, TrainHooks hooks) {
  cfg.validate();
  AugmentationResult out;

  // Phase 1: destruction-reconstruction on source data only.
  nn::Model phase1 = initial_model(source, cfg);
  const nn::Group groups[] = {nn::Group::encoder, nn::Group::recon_head, nn::Group::transform};
  auto params = phase1.parameters(groups);
  const auto opts = cfg.ssl_options();
  const std::size_t epochs1 = cfg.aug_phase1_epochs ? cfg.aug_phase1_epochs : cfg.epochs;
  const std::size_t steps = batch_count(source.train.size(), cfg.batch_size);
  if (steps == 0) throw std::invalid_argument("augmentation mode: not enough source clouds");
  Rng rng = Rng(cfg.seed).child(21);
  std::vector<std::size_t> order(source.train.size());
  for (std::size_t epoch = 0; epoch < epochs1; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = ad::cosine_lr(static_cast<long>(epoch), static_cast<long>(epochs1), cfg.lr);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<PointCloud> batch;
      for (std::size_t i = s * cfg.batch_size;
           i < std::min((s + 1) * cfg.batch_size, order.size()); ++i) {
        batch.push_back(augment(source.train[order[i]], rng, cfg.augment));
      }
      ad::Tape tape;
      auto items = ssl::build_ssl_batch(tape, phase1, batch, opts, rng, ad::Mode::train);
      auto parts = ssl::ssl_loss(tape, phase1, items, opts, ad::Mode::train);
      if (!std::isfinite(parts.value())) {
        throw NumericAbort("non-finite loss in augmentation phase 1", {});
      }
      ad::zero_grads(params);
      tape.backward(parts.total);
      ad::adam_step(params, m.lr, {.weight_decay = cfg.weight_decay});
      m.ssl_recon_src += parts.recon();
      m.ssl_adv_src += parts.adv();
    }
    m.ssl_recon_src /= static_cast<double>(steps);
    m.ssl_adv_src /= static_cast<double>(steps);
    m.steps = steps;
    out.phase1.push_back(m);
  }

  // Phase 2: source-only classifier, items destroyed by the frozen net.
  nn::Model phase2 = initial_model(source, cfg);
  phase2.transform = phase1.transform;
  phase2.transform.set_frozen(true);
  out.transform_model = std::move(phase1);
  out.transform_model.transform.set_frozen(true);

  TrainConfig cfg2 = cfg;
  cfg2.ssl_task = SslTask::none;
  auto aug_rng = std::make_shared<Rng>(Rng(cfg.seed).child(31));
  nn::Model* phi = &out.transform_model;
  hooks.source_hook = [phi, aug_rng, &cfg](std::vector<PointCloud>& batch) {
    for (auto& c : batch) {
      if (aug_rng->uniform() < cfg.aug_probability) {
        c = destroy_with(*phi, c, cfg.alpha, cfg.region_fraction, *aug_rng);
      }
    }
  };
  out.phase2 = run_from(std::move(phase2), source, target, cfg2, std::move(hooks));
  return out;
}

}  // namespace puda::uda
