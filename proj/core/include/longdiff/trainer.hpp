#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "longdiff/checkpoint.hpp"
#include "longdiff/corpus_io.hpp"
#include "longdiff/model.hpp"
#include "longdiff/optim.hpp"

namespace longdiff::train {

struct TrainConfig {
  double peak_lr = 2e-5;
  double min_lr = 2e-6;
  double warmup_fraction = 0.03;
  std::int64_t decay_iters = 400;
  std::int64_t total_iters = 600;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  std::int64_t batch_tokens = 65536;
  std::uint64_t seed = 0;
  PackStrategy mask_strategy = PackStrategy::AdaptiveMask;
  model::LossWeighting weighting = model::LossWeighting::MaskedMean;
  int threads = 1;

  void validate() const;
  [[nodiscard]] std::int64_t warmup_steps() const;
};

/// Linear warmup from 0 to peak over warmup_steps(), cosine decay to min_lr at
/// decay_iters, constant min_lr afterwards.
double lr_at(std::int64_t step, const TrainConfig& config);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

/// One AdamW update at optim.step on a prepared batch; increments optim.step.
/// Throws NumericalError (with the step and a batch hash) on a non-finite loss.
StepResult train_step(const model::DiffusionTransformer<float>& model,
                      model::Parameters<float>& params, OptimState& optim,
                      std::span<const model::NoisySample> batch,
                      std::span<const AttentionMask> masks, const TrainConfig& config);

struct StepLog {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::int64_t tokens_seen = 0;
  double wall_ms = 0.0;
};

/// Compact JSON line {step, lr, loss, grad_norm, tokens_seen, wall_ms}.
std::string to_json_line(const StepLog& log);

/// Samples batches from packed sequences: uniform without replacement per epoch,
/// t ~ U(0,1) per sequence. Every draw is addressed by (seed, step, slot), so a run
/// resumed from a checkpoint consumes the same batches as an uninterrupted one.
class BatchSampler {
 public:
  BatchSampler(std::span<const PackedSequence> data, std::size_t batch_size, std::uint64_t seed,
               TokenId mask_id);

  [[nodiscard]] std::size_t batch_size() const { return batch_size_; }
  void sample(std::int64_t step, std::vector<model::NoisySample>& batch,
              std::vector<AttentionMask>& masks) const;

 private:
  [[nodiscard]] std::size_t sequence_index(std::uint64_t global) const;

  std::span<const PackedSequence> data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  TokenId mask_id_;
};

/// Hash of the token ids in a batch, for diagnostics.
std::uint64_t batch_hash(std::span<const model::NoisySample> batch);

struct TrainerState {
  model::Parameters<float> params;
  OptimState optim;
};

/// Runs `config.total_iters` steps (or until `stop_at`) from state.optim.step.
/// `on_step` receives every step log; `on_checkpoint` is invoked every
/// `checkpoint_every` steps when non-zero.
void run_training(const model::DiffusionTransformer<float>& model, TrainerState& state,
                  std::span<const PackedSequence> data, const TrainConfig& config,
                  std::int64_t stop_at, const std::function<void(const StepLog&)>& on_step,
                  std::int64_t checkpoint_every = 0,
                  const std::function<void(const TrainerState&)>& on_checkpoint = {});

struct ExtendResult {
  Checkpoint checkpoint;
  rope::ScalingReport before;
  rope::ScalingReport after;
};

/// Rewrites the RoPE scaling and max_positions of a checkpoint for a longer context.
/// Parameters are untouched; the step counter and optimizer state are reset so the
/// result is ready for post-training.
ExtendResult extend(const Checkpoint& checkpoint, long new_target_context, rope::ScalingMode mode);

}  // namespace longdiff::train
