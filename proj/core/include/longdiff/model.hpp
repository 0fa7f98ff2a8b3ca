#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "longdiff/packing.hpp"
#include "longdiff/rope.hpp"
#include "longdiff/vocab.hpp"

namespace longdiff::model {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int vocab_size = vocab::kByteVocabSize;
  TokenId mask_id = vocab::kMaskId;
  TokenId eod_id = vocab::kEodId;
  TokenId pad_id = vocab::kPadId;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int head_dim = 32;
  long max_positions = 256;
  int mlp_multiplier = 4;
  // rope.head_dim must equal head_dim. An unextended model uses VanillaNTK with
  // target_context == train_context, which gives lambda == 1.
  rope::RopeConfig rope{10000.0, 32, 256, 256, rope::ScalingMode::VanillaNTK};

  void validate() const;
  [[nodiscard]] int mlp_dim() const { return mlp_multiplier * d_model; }
  [[nodiscard]] double effective_base() const;
};

/// All learnable tensors. Normalization gains are stored as 1 x d_model rows so every
/// tensor has the same type.
template <typename T>
struct LayerParams {
  Matrix<T> attn_norm, wq, wk, wv, wo;
  Matrix<T> mlp_norm, w1, w2;
};

template <typename T>
struct Parameters {
  Matrix<T> embedding;  // vocab x d_model
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_norm;  // 1 x d_model
  Matrix<T> head;        // d_model x vocab, untied

  /// Visits every tensor in checkpoint order with a stable name.
  template <typename F>
  void visit(F&& fn) {
    visit_impl(*this, fn);
  }
  template <typename F>
  void visit(F&& fn) const {
    visit_impl(*this, fn);
  }

  /// Tensors in checkpoint order, for zipping parameters with gradients or moments.
  [[nodiscard]] std::vector<Matrix<T>*> tensors();
  [[nodiscard]] std::vector<const Matrix<T>*> tensors() const;

  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] bool all_finite() const;
  void set_zero();
  /// Same shapes, zero values.
  [[nodiscard]] Parameters zeros_like() const;
  template <typename U>
  [[nodiscard]] Parameters<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& fn) {
    fn(std::string("embedding"), self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& layer = self.layers[l];
      fn(p + "attn_norm", layer.attn_norm);
      fn(p + "wq", layer.wq);
      fn(p + "wk", layer.wk);
      fn(p + "wv", layer.wv);
      fn(p + "wo", layer.wo);
      fn(p + "mlp_norm", layer.mlp_norm);
      fn(p + "w1", layer.w1);
      fn(p + "w2", layer.w2);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("head"), self.head);
  }
};

/// Allocates tensors for `config`. Norm gains are 1, matrices N(0, init_std^2).
template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

/// Throws ConfigError when shapes disagree with `config`.
template <typename T>
void check_shapes(const ModelConfig& config, const Parameters<T>& params);

struct NoisySample {
  std::vector<TokenId> x0;
  std::vector<TokenId> xt;
  double t = 0.0;
  std::vector<std::size_t> masked_positions;  // ascending
};

/// Masks every position independently with probability t.
NoisySample corrupt(std::span<const TokenId> x0, double t, std::mt19937_64& rng,
                    TokenId mask_id = vocab::kMaskId);

enum class LossWeighting {
  MaskedMean,  // mean over masked positions of -log p(x0_i | x_t)
  InverseT,    // (1/t) * sum over masked positions / L
};

/// Non-negative masked-token cross-entropy; 0 when nothing is masked.
template <typename T>
double masked_nll(const Matrix<T>& logits, const NoisySample& sample,
                  LossWeighting weighting = LossWeighting::MaskedMean);

/// Row-wise softmax in double precision.
template <typename T>
Matrix<double> softmax_rows(const Matrix<T>& logits);

/// Bidirectional pre-norm transformer with RoPE attention and pluggable attention
/// permissions. Stateless apart from the rotary table derived from the config.
template <typename T>
class DiffusionTransformer {
 public:
  explicit DiffusionTransformer(ModelConfig config);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const rope::RotaryTable& rotary() const { return rotary_; }

  /// L x vocab logits.
  [[nodiscard]] Matrix<T> forward(const Parameters<T>& params, std::span<const TokenId> tokens,
                                  const AttentionMask& mask) const;

  /// Adds scale * d(loss)/d(params) into `grad` and returns the sample loss.
  double loss_and_grad(const Parameters<T>& params, const NoisySample& sample,
                       const AttentionMask& mask, Parameters<T>& grad, double scale = 1.0,
                       LossWeighting weighting = LossWeighting::MaskedMean) const;

 private:
  struct Cache;
  Matrix<T> run(const Parameters<T>& params, std::span<const TokenId> tokens,
                const AttentionMask& mask, Cache* cache) const;

  ModelConfig config_;
  rope::RotaryTable rotary_;
};

/// Mean loss over the batch and its gradient. Samples are processed on up to `threads`
/// workers; the reduction order is fixed so results do not depend on `threads`.
template <typename T>
double batch_loss_and_grad(const DiffusionTransformer<T>& model, const Parameters<T>& params,
                           std::span<const NoisySample> batch, std::span<const AttentionMask> masks,
                           Parameters<T>& grad, int threads = 1,
                           LossWeighting weighting = LossWeighting::MaskedMean);

}  // namespace longdiff::model
