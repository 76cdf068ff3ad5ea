#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flowgate/model.hpp"

namespace flowgate {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;  // steady-state
  int warmup_steps = 500;       // linear ramp from 0
  std::uint64_t seed = 0;
  double clip_norm = 50.0;  // global gradient norm
  double validation_fraction = 0.1;
  int threads = 1;
};

/// Adam with bias correction; moments are kept per parameter, aligned
/// with the model's parameter order.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const std::vector<Parameter*>& params);
};

void adam_step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, AdamState& state, double lr);

/// -mean_i log_prob(x_i) in nats over a dequantized batch. Throws
/// NumericError naming the offending sample on non-finite values.
double nll_loss(const FlowModel& model, const std::vector<Tensor>& batch);

struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;  // optimizer steps taken so far
  double lr = 0.0;
  double train_nll = 0.0;          // nats, epoch mean
  double val_bits_per_dim = 0.0;
};

struct TrainResult {
  FlowModel model;  // best-validation parameters
  std::vector<EpochRecord> history;
  double best_val_bits_per_dim = 0.0;
  int best_epoch = 0;
  bool aborted = false;  // numeric divergence; model holds last good state
  std::string abort_reason;
};

/// Linear warmup: steady * min(1, step / warmup); full rate when warmup
/// is zero. `step` starts at 1.
double warmup_lr(double steady, int warmup_steps, std::int64_t step);

/// Seed-fixed validation split: (validation indices, training indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t n, double fraction,
                                                                               std::uint64_t seed);

/// Training order for one epoch; a permutation of `base`.
std::vector<std::size_t> epoch_permutation(std::vector<std::size_t> base, std::uint64_t seed, int epoch);

/// Maximizes sum_i log p(x_i) over raw integer-valued images:
/// data-dependent actnorm init on the first batch, fresh uniform
/// dequantization noise per epoch, seeded shuffling, Adam with linear
/// warmup and global-norm clipping. Returns the best-validation
/// checkpoint. Per-sample gradients within a batch are evaluated in
/// parallel and combined by a fixed pairwise reduction, so results do
/// not depend on the thread count.
TrainResult train(FlowModel model, const std::vector<Tensor>& raw_images, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = nullptr);

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace flowgate
