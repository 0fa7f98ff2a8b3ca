#pragma once

#include <cstdint>

#include "longdiff/model.hpp"

namespace longdiff::train {

/// AdamW moments congruent to the parameters.
struct OptimState {
  model::Parameters<float> first_moment;
  model::Parameters<float> second_moment;
  std::int64_t step = 0;

  static OptimState zeros_like(const model::Parameters<float>& params);
  [[nodiscard]] bool all_finite() const;
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Global L2 norm over all gradient tensors (accumulated in double).
template <typename T>
double global_norm(const model::Parameters<T>& grad);

/// Scales grad so its global norm is min(norm, max_norm). Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(model::Parameters<T>& grad, double max_norm);

/// Decoupled weight decay on matrices; normalization gains are not decayed.
void adamw_update(model::Parameters<float>& params, const model::Parameters<float>& grad,
                  OptimState& state, double lr, const AdamWHyper& hyper);

}  // namespace longdiff::train
