#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "effnet/augment.hpp"
#include "effnet/blocks.hpp"
#include "effnet/checkpoint.hpp"
#include "effnet/data.hpp"
#include "effnet/metrics.hpp"
#include "effnet/model.hpp"

namespace effnet {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double base_lr = 0.003;
  double lr_decay_factor = 10.0;
  std::vector<double> milestone_fractions{0.5, 0.766};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Drives weight initialization (copied into model.seed), shuffling and
  /// augmentation.
  std::uint64_t seed = 0;
  AugmentConfig augment;
  double threshold = 0.5;

  void validate() const;
  /// Epochs at which the rate drops: round(fraction * epochs).
  std::vector<std::size_t> milestones() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

/// base_lr / decay^(milestones passed), rounded to 15 significant digits so
/// that each level equals its decimal literal (0.003 / 10 == 0.0003).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// Adam with bias correction:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,
///   w -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
class Adam {
 public:
  Adam(ParameterList params, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);

  /// Applies one update from the current gradients; parameters without a
  /// gradient are left alone. Throws NumericError on a non-finite gradient.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  std::vector<TensorRecord> state_records() const;
  void load_state(const Checkpoint& ckpt, std::uint64_t steps);

 private:
  ParameterList params_;
  double b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  MetricReport train;  // from the scores seen during the epoch's updates
  MetricReport val;
};

struct RunRecord {
  std::string config_label;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string dataset_digest;
  ChannelStats norm;
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;
  std::string checkpoint_path;

  const EpochStats& last() const { return epochs.back(); }
};

struct TrainOptions {
  std::filesystem::path checkpoint;  // empty: do not write
  std::ostream* log = nullptr;
};

struct TrainResult {
  RunRecord record;
  Checkpoint checkpoint;
  /// Final weights at full precision; the checkpoint holds them at 32 bits.
  std::optional<EffNetMini> model;
};

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const TrainOptions& options = {});

/// Per-epoch CSV. Deterministic: contains no timings or paths.
std::string epochs_csv(const RunRecord& run);
std::string epochs_table(const RunRecord& run);

/// Sigmoid probabilities for every image, no augmentation, batches of
/// `batch_size` under NoGradGuard.
std::vector<double> predict(const EffNetMini& model, const Dataset& ds,
                            const ChannelStats& norm, std::size_t batch_size = 32);

/// Loads the normalization statistics stored by `train`.
ChannelStats checkpoint_norm(const Checkpoint& ckpt);

MetricReport evaluate(const Checkpoint& ckpt, const Dataset& ds, double threshold = 0.5);

struct FlagTuple {
  bool rcc = false, rds = false, ff = false, attention = false;
  bool operator==(const FlagTuple&) const = default;
};

/// The ten rows of the ablation table, in its published order.
std::vector<FlagTuple> table2_grid();

/// CSV with header "rcc,rds,ff,attention" and 0/1 cells.
std::vector<FlagTuple> parse_grid(const std::string& text);

struct AblationRow {
  FlagTuple flags;
  RunRecord run;
};

/// Rejects every invalid tuple before training anything, then trains one
/// model per tuple from the same seed and split.
std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<FlagTuple>& grid,
                                const Dataset& train_set, const Dataset& val_set,
                                std::ostream* log = nullptr);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace effnet
