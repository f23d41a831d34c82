#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ecgclip/data_model.hpp"
#include "ecgclip/encoder.hpp"
#include "ecgclip/text_bank.hpp"

namespace ecgclip {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  double width_factor = 1.0;
  /// Epochs between validation passes; 0 disables validation.
  std::size_t eval_every = 1;
  /// Epochs between periodic checkpoints; 0 writes only the final one.
  std::size_t checkpoint_every = 0;
  bool freeze_tau = false;
  double initial_tau = kInitialTau;
  std::size_t projection_dim = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  /// Throws UsageError on non-positive rates, batch size below 2 or betas outside [0, 1).
  void validate() const;
  /// Width-scaled encoder for inputs of `input_length` samples and a bank of `text_dim`.
  ModelConfig model_config(std::size_t text_dim, std::size_t input_length) const;

  bool operator==(const TrainConfig&) const = default;
};

/// First and second moment estimates, one vector per parameter tensor.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  bool operator==(const AdamState&) const = default;
};

/// Everything needed to continue training bit-exactly; the checkpoint payload.
struct TrainState {
  TrainConfig config;
  Model<float> model;
  AdamState optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t bank_hash = 0;

  bool operator==(const TrainState&) const = default;
};

TrainState init_state(const TrainConfig& config, std::size_t text_dim, std::size_t input_length,
                      std::uint64_t bank_hash);

/// One AdamW update. Decay is decoupled (w *= 1 - lr * wd before the moment
/// step) and skips normalization parameters and log_tau. A frozen log_tau is
/// left untouched; otherwise tau is clamped afterwards.
void adamw_update(TrainState& state, const Gradients<float>& grads);

/// Contrastive loss and one optimizer update on the records at `indices`.
/// Throws DataError naming a label missing from the bank.
double train_step(TrainState& state, const EcgDataset& data, std::span<const std::size_t> indices,
                  const EmbeddingTable& bank);

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double tau = 0.0;
  std::optional<double> val_top1;
  std::optional<double> val_top5;
  double seconds = 0.0;
};

/// Record order of an epoch: a permutation keyed by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

/// Shuffles, steps through full batches (a final batch of fewer than 2
/// records is dropped), then validates when due.
EpochMetrics run_epoch(TrainState& state, const EcgDataset& train, const EcgDataset* val,
                       const EmbeddingTable& bank);

struct TrainOptions {
  TrainConfig config;
  /// Continue from this state. Its hyperparameters are kept; epochs,
  /// eval_every and checkpoint_every come from `config`.
  std::optional<TrainState> resume;
  /// Receives metrics.ndjson and checkpoints; empty writes nothing.
  std::filesystem::path out_dir;
  /// Called after every epoch; returning false stops training.
  std::function<bool(const EpochMetrics&, const TrainState&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochMetrics> log;
  bool stopped_early = false;
};

/// Full training run. Rejects patient leakage between train and val before
/// the first step. Writes out_dir/metrics.ndjson incrementally,
/// out_dir/epoch_NNNN.ckp at the checkpoint cadence and out_dir/final.ckp.
TrainResult train(const EcgDataset& train_set, const EcgDataset* val_set, const EmbeddingTable& bank,
                  const TrainOptions& options);

/// One NDJSON line with fields epoch, loss, tau, val_top1, val_top5, seconds.
std::string metrics_json(const EpochMetrics& m);

/// CKP1 encoding.
std::vector<std::uint8_t> encode_checkpoint(const TrainState& s);
TrainState decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const TrainState& s, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace ecgclip
