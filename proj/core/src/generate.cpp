#include "longdiff/generate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "longdiff/error.hpp"

namespace longdiff::model {

std::vector<std::size_t> LowConfidenceRemask::choose(std::span<const Candidate> candidates,
                                                     std::size_t n_commit,
                                                     std::mt19937_64& /*rng*/) const {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (candidates[a].confidence != candidates[b].confidence) {
      return candidates[a].confidence > candidates[b].confidence;
    }
    return candidates[a].position < candidates[b].position;
  });
  order.resize(std::min(n_commit, order.size()));
  return order;
}

std::vector<std::size_t> RandomRemask::choose(std::span<const Candidate> candidates,
                                              std::size_t n_commit, std::mt19937_64& rng) const {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates.
  const std::size_t take = std::min(n_commit, order.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(take);
  return order;
}

std::unique_ptr<RemaskPolicy> make_remask_policy(std::string_view name) {
  if (name == "low_confidence") return std::make_unique<LowConfidenceRemask>();
  if (name == "random") return std::make_unique<RandomRemask>();
  throw ConfigError("generate: unknown remask policy '" + std::string(name) + "'");
}

void DecodeConfig::validate() const {
  if (gen_len == 0 || block_size == 0 || steps == 0) {
    throw ConfigError("generate: gen_len, block_size and steps must be positive");
  }
}

std::size_t remaining_after_step(std::size_t block, std::size_t k, std::size_t steps) {
  if (k >= steps) return 0;
  return (block * (steps - k) + steps - 1) / steps;
}

std::vector<TokenId> denoise_generate(const Denoiser& model, std::span<const TokenId> prompt,
                                      const DecodeConfig& decode, const RemaskPolicy& policy,
                                      std::mt19937_64& rng) {
  decode.validate();
  const long max_prompt = model.max_positions() - static_cast<long>(decode.gen_len);
  if (max_prompt < 0 || static_cast<long>(prompt.size()) > max_prompt) {
    throw ConfigError("generate: prompt of " + std::to_string(prompt.size()) +
                      " tokens leaves no room for " + std::to_string(decode.gen_len) +
                      " generated tokens within max_positions " +
                      std::to_string(model.max_positions()));
  }
  const TokenId mask_id = model.mask_id();
  const auto suppressed = model.suppressed_ids();

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  const std::size_t offset = seq.size();
  seq.resize(offset + decode.gen_len, mask_id);
  const AttentionMask mask(MaskSpec::full(), seq.size());

  for (std::size_t begin = 0; begin < decode.gen_len; begin += decode.block_size) {
    const std::size_t end = std::min(begin + decode.block_size, decode.gen_len);
    const std::size_t block = end - begin;
    std::size_t still_masked = block;
    for (std::size_t k = 1; k <= decode.steps && still_masked > 0; ++k) {
      const std::size_t target = remaining_after_step(block, k, decode.steps);
      if (target >= still_masked) continue;
      const std::size_t n_commit = still_masked - target;

      const Matrix<double> logits = model.logits(seq, mask);
      std::vector<Candidate> candidates;
      candidates.reserve(still_masked);
      for (std::size_t p = offset + begin; p < offset + end; ++p) {
        if (seq[p] != mask_id) continue;
        const auto row = logits.row(static_cast<Eigen::Index>(p));
        double best = -std::numeric_limits<double>::infinity();
        TokenId arg = 0;
        for (Eigen::Index v = 0; v < row.size(); ++v) {
          const auto id = static_cast<TokenId>(v);
          if (std::find(suppressed.begin(), suppressed.end(), id) != suppressed.end()) continue;
          if (row[v] > best) {
            best = row[v];
            arg = id;
          }
        }
        const double m = row.maxCoeff();
        const double z = (row.array() - m).exp().sum();
        candidates.push_back({p, arg, std::exp(best - m) / z});
      }
      for (const std::size_t idx : policy.choose(candidates, n_commit, rng)) {
        seq[candidates[idx].position] = candidates[idx].token;
      }
      still_masked = target;
    }
  }
  return {seq.begin() + static_cast<long>(offset), seq.end()};
}

}  // namespace longdiff::model
