#pragma once

#include <memory>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "longdiff/model.hpp"

namespace longdiff::model {

/// Anything that maps a (partially masked) token sequence to per-position logits.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  [[nodiscard]] virtual Matrix<double> logits(std::span<const TokenId> tokens,
                                              const AttentionMask& mask) const = 0;
  [[nodiscard]] virtual long max_positions() const = 0;
  [[nodiscard]] virtual int vocab_size() const = 0;
  [[nodiscard]] virtual TokenId mask_id() const = 0;
  /// Ids that are never emitted during generation (mask and padding by default).
  [[nodiscard]] virtual std::vector<TokenId> suppressed_ids() const { return {mask_id()}; }
};

template <typename T>
class TransformerDenoiser final : public Denoiser {
 public:
  TransformerDenoiser(const DiffusionTransformer<T>& model, const Parameters<T>& params)
      : model_(model), params_(params) {}

  [[nodiscard]] Matrix<double> logits(std::span<const TokenId> tokens,
                                      const AttentionMask& mask) const override {
    return model_.forward(params_, tokens, mask).template cast<double>();
  }
  [[nodiscard]] long max_positions() const override { return model_.config().max_positions; }
  [[nodiscard]] int vocab_size() const override { return model_.config().vocab_size; }
  [[nodiscard]] TokenId mask_id() const override { return model_.config().mask_id; }
  [[nodiscard]] std::vector<TokenId> suppressed_ids() const override {
    return {model_.config().mask_id, model_.config().pad_id};
  }

 private:
  const DiffusionTransformer<T>& model_;
  const Parameters<T>& params_;
};

struct Candidate {
  std::size_t position = 0;
  TokenId token = 0;
  double confidence = 0.0;
};

/// Chooses which predictions to commit in one denoising step; the rest stay masked.
class RemaskPolicy {
 public:
  virtual ~RemaskPolicy() = default;
  [[nodiscard]] virtual std::string_view name() const = 0;
  /// Returns indices into `candidates` of the `n_commit` entries to commit.
  [[nodiscard]] virtual std::vector<std::size_t> choose(std::span<const Candidate> candidates,
                                                        std::size_t n_commit,
                                                        std::mt19937_64& rng) const = 0;
};

/// Commits the most confident predictions (ties broken by position).
class LowConfidenceRemask final : public RemaskPolicy {
 public:
  [[nodiscard]] std::string_view name() const override { return "low_confidence"; }
  [[nodiscard]] std::vector<std::size_t> choose(std::span<const Candidate> candidates,
                                                std::size_t n_commit,
                                                std::mt19937_64& rng) const override;
};

/// Commits a uniformly random subset.
class RandomRemask final : public RemaskPolicy {
 public:
  [[nodiscard]] std::string_view name() const override { return "random"; }
  [[nodiscard]] std::vector<std::size_t> choose(std::span<const Candidate> candidates,
                                                std::size_t n_commit,
                                                std::mt19937_64& rng) const override;
};

std::unique_ptr<RemaskPolicy> make_remask_policy(std::string_view name);

struct DecodeConfig {
  std::size_t gen_len = 32;
  std::size_t block_size = 32;
  std::size_t steps = 32;

  void validate() const;
};

/// Positions of a block of `block` masked tokens still masked after step k of `steps`:
/// ceil(block * (1 - k/steps)).
std::size_t remaining_after_step(std::size_t block, std::size_t k, std::size_t steps);

/// Block-wise iterative denoising of `gen_len` tokens appended to `prompt`. Blocks are
/// finalized left to right; the last block may be shorter than block_size.
std::vector<TokenId> denoise_generate(const Denoiser& model, std::span<const TokenId> prompt,
                                      const DecodeConfig& decode, const RemaskPolicy& policy,
                                      std::mt19937_64& rng);

}  // namespace longdiff::model
