#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "puda/data.hpp"
#include "puda/networks.hpp"
#include "puda/ssl.hpp"

namespace puda::uda {

enum class SslTask { learnable, rotate, none };

std::string to_string(SslTask t);
SslTask parse_ssl_task(const std::string& s);

inline constexpr std::size_t kNoEarlyStop = std::numeric_limits<std::size_t>::max();

/// Every knob of a training run. Defaults follow the reference setup.
struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 150;
  double lr = 0.001;
  double weight_decay = 0.0005;
  std::size_t early_stop_patience = 20;
  std::uint64_t seed = 0;
  double aux_weight = 1.0;

  SslTask ssl_task = SslTask::learnable;
  double alpha = 0.05;
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  std::size_t variants = 2;
  bool multi_region = true;  // false forces a single destroyed variant
  double region_fraction = 0.5;
  bool detach_recon_from_transform = false;
  /// When false, encoder passes of the auxiliary task normalize with batch
  /// statistics but leave the running statistics to the main task, so the
  /// eval-mode classifier never sees statistics of destroyed clouds.
  bool aux_updates_bn_stats = false;

  AugmentOptions augment;
  bool crop_source = false;
  double crop_retain = 0.7;

  bool aug_mode = false;  // learned-transformation-as-augmentation run
  double aug_probability = 0.5;
  std::size_t aug_phase1_epochs = 0;  // 0: same as epochs

  std::size_t eval_batch = 64;
  nn::NetworkConfig network;

  ssl::SslOptions ssl_options() const;
  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Per-step loss values.
struct StepStats {
  double total = 0.0;
  double main = 0.0;
  double recon_src = 0.0;
  double adv_src = 0.0;
  double recon_tgt = 0.0;
  double adv_tgt = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double main_loss = 0.0;
  double ssl_recon_src = 0.0;
  double ssl_recon_tgt = 0.0;
  double ssl_adv_src = 0.0;
  double ssl_adv_tgt = 0.0;
  double src_val_acc = 0.0;
  double src_val_loss = 0.0;
  std::optional<double> tgt_test_acc;
  double lr = 0.0;
  std::size_t steps = 0;
};

/// One JSON object, no trailing newline.
std::string to_json_line(const EpochMetrics& m);

/// Raised when a loss or gradient goes non-finite mid-training.
class NumericAbort : public NumericError {
 public:
  NumericAbort(const std::string& what, std::filesystem::path last_good)
      : NumericError(what), last_good_checkpoint(std::move(last_good)) {}
  std::filesystem::path last_good_checkpoint;
};

/// Parameter groups updated for a given task.
std::vector<nn::Group> active_groups(SslTask task);

/// Applies a source-side augmentation in place (aug mode phase 2).
using SourceHook = std::function<void(std::vector<PointCloud>& batch)>;

/// One joint update: source cross-entropy plus the auxiliary loss on both
/// domains, then one ADAM step over the active parameter groups.
/// Augmentation (and source cropping when enabled) happens here.
StepStats train_step(nn::Model& model, std::span<const PointCloud> source_batch,
                     std::span<const PointCloud> target_batch, const TrainConfig& cfg,
                     double lr, Rng& rng, const SourceHook& source_hook = {});

/// Number of batches drawn from n samples (a trailing batch of one is
/// dropped because batch statistics need two rows).
std::size_t batch_count(std::size_t n, std::size_t batch_size);

struct TrainHooks {
  /// Target-test accuracy for reporting only; its value is recorded and
  /// never consulted by selection or stopping.
  std::function<double(nn::Model&)> report_target;
  std::function<void(const EpochMetrics&)> on_epoch;
  SourceHook source_hook;
  /// When set, receives metrics.jsonl, best.ckpt and final.ckpt.
  std::filesystem::path run_dir;
};

struct TrainResult {
  nn::Model best;
  nn::Model last;
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
  double best_val_acc = -1.0;
  double best_val_loss = 0.0;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
};

/// Builds the initial model for a source dataset.
nn::Model initial_model(const data::DomainDataset& source, const TrainConfig& cfg);

/// Trains on labeled source train data and unlabeled target clouds, keeps
/// the checkpoint with the best source validation accuracy (ties go to the
/// lower validation loss) and stops after `early_stop_patience` epochs
/// without improvement.
///
/// Target clouds must carry no labels (ContractError otherwise).
TrainResult train_loop(const data::DomainDataset& source,
                       std::span<const PointCloud> target_unlabeled, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});
TrainResult train_loop(nn::Model initial, const data::DomainDataset& source,
                       std::span<const PointCloud> target_unlabeled, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

struct EvalReport {
  double accuracy = 0.0;
  double mean_loss = 0.0;  // cross-entropy averaged over clouds
  std::vector<std::optional<double>> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> class_counts;
  std::size_t total = 0;
  std::vector<std::string> class_names;
};

std::string to_json(const EvalReport& r);

std::vector<int> predict(nn::Model& model, std::span<const PointCloud> clouds,
                         std::size_t batch = 64);

/// Eval-mode accuracy report; no augmentation.
EvalReport evaluate(nn::Model& model, std::span<const PointCloud> labeled,
                    std::size_t batch = 64);
/// Same, after checking the dataset vocabulary matches the model's.
EvalReport evaluate(nn::Model& model, const data::DomainDataset& ds, const std::string& split,
                    std::size_t batch = 64);

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AdaptationResult {
  TrainResult train;
  EvalReport source_val;
  EvalReport target_test;
};

/// Full framework run: train_loop on (source, unlabeled target train),
/// then evaluate the selected checkpoint on the target test split.
AdaptationResult run_adaptation(const data::DomainDataset& source,
                                const data::DomainDataset& target, const TrainConfig& cfg,
                                TrainHooks hooks = {});

/// Source-only training evaluated directly on the target.
AdaptationResult run_no_adapt_baseline(const data::DomainDataset& source,
                                       const data::DomainDataset& target, TrainConfig cfg,
                                       TrainHooks hooks = {});

struct AugmentationResult {
  std::vector<EpochMetrics> phase1;
  nn::Model transform_model;  // phase-1 model holding the learned transformation
  AdaptationResult phase2;
};

/// Learns the transformation on source data alone, then trains a
/// source-only classifier whose batch items are destroyed by the frozen
/// transformation with probability `aug_probability`.
AugmentationResult augmentation_mode_train(const data::DomainDataset& source,
                                           const data::DomainDataset& target,
                                           const TrainConfig& cfg, TrainHooks hooks = {});

/// Destroys one region of `cloud` with the model's (eval-mode) transformation.
PointCloud destroy_with(nn::Model& model, const PointCloud& cloud, double alpha,
                        double region_fraction, Rng& rng, RegionMask* mask_out = nullptr);

}  // namespace puda::uda
