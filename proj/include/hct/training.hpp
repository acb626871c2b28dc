#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hct/checkpoint.hpp"
#include "hct/data.hpp"
#include "hct/model.hpp"

namespace hct::train {

struct TrainConfig {
  double lr0 = 1e-4;
  double poly_power = 0.9;
  std::size_t epochs = 100;
  std::size_t batch_size = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  /// true: theta -= lr * wd * theta after the Adam step; false: classical L2 (g += wd * theta).
  bool decoupled_weight_decay = true;
  bool augment = true;
  std::uint64_t seed = 0;  // shuffling and augmentation
  /// Write a checkpoint every N epochs when > 0 and an output directory is set.
  std::size_t checkpoint_every = 0;
  /// When false the log's seconds column is written as 0.
  bool log_timing = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

/// First/second moments per parameter (store order) and the step counter.
struct OptimState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

/// Mean over pixels of -log(p_true), probabilities floored at 1e-12.
/// probs is (B, 2, H, W); mask is (B, H, W) or (H, W) when B = 1.
double cross_entropy(const Tensor& probs, const Tensor& mask);
ad::Var cross_entropy(const ad::Var& probs, const Tensor& mask);

/// lr0 * (1 - step / total_steps)^power; step > total_steps is an ArgumentError.
double poly_lr(std::size_t step, std::size_t total_steps, double lr0, double power);

/// One bias-corrected Adam update in place. `grads[i]` pairs with `*params[i]`.
void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, OptimState& state, double lr,
               const TrainConfig& config);
/// Same, reading gradients from the store's parameter leaves.
void adam_step(nn::ParamStore& store, OptimState& state, double lr, const TrainConfig& config);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0;
  double lr = 0;          // rate used for the epoch's last step
  double seconds = 0;

  bool operator==(const EpochLog&) const = default;
};

struct TrainOptions {
  /// Directory for train_log.csv and checkpoints; nothing is written when empty.
  std::filesystem::path out_dir;
  /// Continue from a checkpoint written by a previous run with the same config.
  std::optional<model::CheckpointData> resume;
};

struct TrainResult {
  std::vector<EpochLog> log;
  OptimState state;
};

/// Epoch loop: shuffle -> (augment) -> forward -> cross-entropy -> backward ->
/// poly lr -> Adam. Samples are raw and normalized here. Parameters and
/// optimizer moments are kept at float32 precision between steps, so a
/// checkpoint captures the full training state. A non-finite loss throws
/// NumericalError naming the epoch and step.
TrainResult train(model::Model& model, const std::vector<data::Sample>& samples, const TrainConfig& config,
                  const TrainOptions& options = {});

/// Checkpoint holding parameters, Adam moments and progress counters.
model::CheckpointData training_checkpoint(const model::Model& model, const OptimState& state, std::size_t epoch,
                                          const TrainConfig& config);

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

/// Stacks normalized samples into (B, 1, H, W) PET/CT tensors and a (B, H, W) mask.
struct Batch {
  Tensor pet, ct, mask;
};
Batch make_batch(const std::vector<const data::Sample*>& samples);

}  // namespace hct::train
