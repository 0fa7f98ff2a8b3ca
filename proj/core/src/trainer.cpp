#include "longdiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "longdiff/error.hpp"
#include "longdiff/rng.hpp"

namespace longdiff::train {

// ---------------------------------------------------------------------------
// AdamW

OptimState OptimState::zeros_like(const model::Parameters<float>& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

bool OptimState::all_finite() const {
  return first_moment.all_finite() && second_moment.all_finite();
}

template <typename T>
double global_norm(const model::Parameters<T>& grad) {
  double sq = 0.0;
  grad.visit([&sq](const std::string&, const model::Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const auto v = static_cast<double>(m.data()[i]);
      sq += v * v;
    }
  });
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(model::Parameters<T>& grad, double max_norm) {
  const double norm = global_norm(grad);
  if (norm > max_norm && norm > 0.0) {
    const auto s = static_cast<T>(max_norm / norm);
    grad.visit([s](const std::string&, model::Matrix<T>& m) { m *= s; });
  }
  return norm;
}

template double global_norm<float>(const model::Parameters<float>&);
template double global_norm<double>(const model::Parameters<double>&);
template double clip_grad_norm<float>(model::Parameters<float>&, double);
template double clip_grad_norm<double>(model::Parameters<double>&, double);

void adamw_update(model::Parameters<float>& params, const model::Parameters<float>& grad,
                  OptimState& state, double lr, const AdamWHyper& hyper) {
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  std::vector<std::string> names;
  params.visit([&names](const std::string& name, const model::Matrix<float>&) { names.push_back(name); });
  auto p = params.tensors();
  const auto g = grad.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  for (std::size_t k = 0; k < p.size(); ++k) {
    const bool decay = names[k].find("norm") == std::string::npos;
    const double wd = decay ? hyper.weight_decay : 0.0;
    float* pd = p[k]->data();
    const float* gd = g[k]->data();
    float* md = m[k]->data();
    float* vd = v[k]->data();
    for (Eigen::Index i = 0; i < p[k]->size(); ++i) {
      const double gi = gd[i];
      const double mi = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gi;
      const double vi = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gi * gi;
      md[i] = static_cast<float>(mi);
      vd[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + hyper.eps) + wd * pd[i];
      pd[i] = static_cast<float>(pd[i] - lr * update);
    }
  }
  state.step = t;
}

// ---------------------------------------------------------------------------
// Schedule

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0) || !(min_lr > 0.0) || min_lr > peak_lr) {
    throw ConfigError("train: need 0 < min_lr <= peak_lr");
  }
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("train: warmup_fraction must lie in (0, 1)");
  }
  if (decay_iters <= 0 || total_iters <= 0) {
    throw ConfigError("train: decay_iters and total_iters must be positive");
  }
  if (warmup_fraction * static_cast<double>(decay_iters) < 1.0) {
    throw ConfigError("train: warmup_fraction * decay_iters must be >= 1");
  }
  if (weight_decay < 0.0 || !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: invalid AdamW hyper-parameters");
  }
  if (!(grad_clip > 0.0) || batch_tokens <= 0 || threads < 1) {
    throw ConfigError("train: grad_clip, batch_tokens and threads must be positive");
  }
}

std::int64_t TrainConfig::warmup_steps() const {
  return static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(decay_iters) - 1e-9));
}

double lr_at(std::int64_t step, const TrainConfig& config) {
  const std::int64_t warmup = config.warmup_steps();
  if (step <= 0) return 0.0;
  if (step <= warmup) {
    return config.peak_lr * (static_cast<double>(step) / static_cast<double>(warmup));
  }
  if (step >= config.decay_iters) return config.min_lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(config.decay_iters - warmup);
  return config.min_lr +
         (config.peak_lr - config.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Steps

std::uint64_t batch_hash(std::span<const model::NoisySample> batch) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& s : batch) {
    for (const TokenId t : s.xt) {
      h = (h ^ t) * 0x100000001b3ull;
    }
  }
  return h;
}

StepResult train_step(const model::DiffusionTransformer<float>& model,
                      model::Parameters<float>& params, OptimState& optim,
                      std::span<const model::NoisySample> batch,
                      std::span<const AttentionMask> masks, const TrainConfig& config) {
  const auto fail = [&](const std::string& what) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(batch_hash(batch)));
    return NumericalError("train: " + what + " at step " + std::to_string(optim.step) +
                          " (batch hash " + buf + ")");
  };
  StepResult result;
  model::Parameters<float> grad;
  try {
    result.loss = model::batch_loss_and_grad(model, params, batch, masks, grad, config.threads,
                                             config.weighting);
  } catch (const NumericalError& e) {
    throw fail(e.what());
  }
  if (!std::isfinite(result.loss)) throw fail("non-finite loss");
  result.grad_norm = clip_grad_norm(grad, config.grad_clip);
  if (!std::isfinite(result.grad_norm)) throw fail("non-finite gradient norm");
  result.lr = lr_at(optim.step + 1, config);
  adamw_update(params, grad, optim, result.lr,
               {config.beta1, config.beta2, 1e-8, config.weight_decay});
  return result;
}

std::string to_json_line(const StepLog& log) {
  nlohmann::json j = {{"step", log.step},       {"lr", log.lr},
                      {"loss", log.loss},       {"grad_norm", log.grad_norm},
                      {"tokens_seen", log.tokens_seen}, {"wall_ms", log.wall_ms}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Batches

BatchSampler::BatchSampler(std::span<const PackedSequence> data, std::size_t batch_size,
                           std::uint64_t seed, TokenId mask_id)
    : data_(data), batch_size_(batch_size), seed_(seed), mask_id_(mask_id) {
  if (data_.empty()) throw ConfigError("train: no packed sequences");
  if (batch_size_ == 0) throw ConfigError("train: batch size must be positive");
}

std::size_t BatchSampler::sequence_index(std::uint64_t global) const {
  const std::uint64_t n = data_.size();
  const std::uint64_t epoch = global / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed_, {epoch, 0x5EEDull}));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm[global % n];
}

void BatchSampler::sample(std::int64_t step, std::vector<model::NoisySample>& batch,
                          std::vector<AttentionMask>& masks) const {
  batch.clear();
  masks.clear();
  for (std::size_t b = 0; b < batch_size_; ++b) {
    const std::uint64_t global = static_cast<std::uint64_t>(step) * batch_size_ + b;
    const auto& seq = data_[sequence_index(global)];
    std::mt19937_64 rng(derive_seed(seed_, {static_cast<std::uint64_t>(step), b, 0x7ull}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double t = u(rng);
    batch.push_back(model::corrupt(seq.tokens, t, rng, mask_id_));
    masks.emplace_back(mask_for(seq), seq.tokens.size());
  }
}

void run_training(const model::DiffusionTransformer<float>& model, TrainerState& state,
                  std::span<const PackedSequence> data, const TrainConfig& config,
                  std::int64_t stop_at, const std::function<void(const StepLog&)>& on_step,
                  std::int64_t checkpoint_every,
                  const std::function<void(const TrainerState&)>& on_checkpoint) {
  config.validate();
  if (data.empty()) throw ConfigError("train: no packed sequences");
  const std::size_t seq_len = data.front().tokens.size();
  const auto batch_size = static_cast<std::size_t>(
      std::max<std::int64_t>(1, config.batch_tokens / static_cast<std::int64_t>(seq_len)));
  const BatchSampler sampler(data, batch_size, config.seed, model.config().mask_id);
  const std::int64_t end = std::min(config.total_iters, stop_at);

  std::vector<model::NoisySample> batch;
  std::vector<AttentionMask> masks;
  while (state.optim.step < end) {
    const auto t0 = std::chrono::steady_clock::now();
    sampler.sample(state.optim.step, batch, masks);
    const StepResult r = train_step(model, state.params, state.optim, batch, masks, config);
    const auto t1 = std::chrono::steady_clock::now();
    StepLog log;
    log.step = state.optim.step;
    log.lr = r.lr;
    log.loss = r.loss;
    log.grad_norm = r.grad_norm;
    log.tokens_seen = state.optim.step * static_cast<std::int64_t>(batch_size * seq_len);
    log.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    if (on_step) on_step(log);
    if (checkpoint_every > 0 && on_checkpoint && state.optim.step % checkpoint_every == 0) {
      on_checkpoint(state);
    }
  }
}

// ---------------------------------------------------------------------------
// Extension

ExtendResult extend(const Checkpoint& checkpoint, long new_target_context, rope::ScalingMode mode) {
  const auto& old_rope = checkpoint.config.rope;
  if (new_target_context < checkpoint.config.max_positions ||
      new_target_context < old_rope.target_context) {
    throw ConfigError("extend: new target context " + std::to_string(new_target_context) +
                      " is shorter than the trained context " +
                      std::to_string(checkpoint.config.max_positions));
  }
  ExtendResult out;
  out.before = rope::scaling_factor(old_rope);
  out.checkpoint = checkpoint;
  auto& cfg = out.checkpoint.config;
  cfg.rope = rope::RopeConfig{old_rope.base, old_rope.head_dim, old_rope.train_context,
                              new_target_context, mode};
  cfg.max_positions = new_target_context;
  cfg.validate();
  out.after = rope::scaling_factor(cfg.rope);
  out.checkpoint.step = 0;
  out.checkpoint.optim.reset();
  return out;
}

}  // namespace longdiff::train
