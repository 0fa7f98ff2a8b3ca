#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace longdiff::rope {

enum class ScalingMode { VanillaNTK, BaselineNTK, DiffusionNTK };

std::string_view to_string(ScalingMode mode);
/// Accepts "vanilla", "baseline", "diffusion" or the enumerator names.
ScalingMode parse_mode(std::string_view text);

struct RopeConfig {
  double base = 0.0;
  int head_dim = 0;
  long train_context = 0;
  long target_context = 0;
  ScalingMode mode = ScalingMode::DiffusionNTK;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct ScalingReport {
  ScalingMode mode{};
  double base = 0.0;
  int head_dim = 0;
  double lambda = 1.0;
  int critical_dim = 0;
  // Set when the raw critical-dimension formula exceeded head_dim and was clamped.
  bool critical_dim_clamped = false;
  double effective_base = 0.0;
  long span_trained = 0;
  long span_required = 0;
  double scale_ratio = 1.0;
  std::vector<double> periods_before;
  std::vector<double> periods;
  // 2*pi*(effective_base)^(critical_dim/head_dim); equals span_required for the
  // critical-dimension modes.
  double critical_period = 0.0;
  // Boundary pairs against span_trained under the original base.
  std::optional<int> last_pair_within_span;
  std::optional<int> first_pair_beyond_span;
};

/// theta_i = base^(-2i/d) for i in [0, d/2).
std::vector<double> inv_frequencies(double base, int head_dim);

/// 2*pi / theta_i.
std::vector<double> periods(double base, int head_dim);

struct CriticalDimension {
  int value = 0;
  bool clamped = false;
};

/// 2*ceil((d/2) * log_base(span / 2pi)), clamped to [2, head_dim].
CriticalDimension critical_dimension_checked(double base, int head_dim, long span);
int critical_dimension(double base, int head_dim, long span);

ScalingReport scaling_factor(const RopeConfig& config);

/// Precomputed cos/sin per (position, rotary pair).
class RotaryTable {
 public:
  RotaryTable() = default;
  RotaryTable(double effective_base, int head_dim, long max_position);

  [[nodiscard]] int head_dim() const { return head_dim_; }
  [[nodiscard]] long max_position() const { return max_position_; }
  [[nodiscard]] double effective_base() const { return effective_base_; }

  [[nodiscard]] double angle(long position, int pair) const;
  [[nodiscard]] double cos_at(long position, int pair) const {
    return cos_[static_cast<std::size_t>(position) * half_ + pair];
  }
  [[nodiscard]] double sin_at(long position, int pair) const {
    return sin_[static_cast<std::size_t>(position) * half_ + pair];
  }

 private:
  double effective_base_ = 0.0;
  int head_dim_ = 0;
  std::size_t half_ = 0;
  long max_position_ = 0;
  std::vector<double> inv_freq_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

/// Rotates each pair (v[2i], v[2i+1]) by angle(position, i).
std::vector<double> apply_rotary(std::span<const double> vector, long position,
                                 const RotaryTable& table);

/// In-place variant used by the model. Inverse rotation when `inverse` is set.
template <typename Scalar>
void rotate_in_place(std::span<Scalar> vector, long position, const RotaryTable& table,
                     bool inverse = false);

struct RopeReport {
  ScalingReport scaling;
  std::string csv;
  std::string json;
};

/// CSV header: pair_index,dimension,period_before,period_after,covers_T_Ecap
RopeReport rope_report(const RopeConfig& config);

std::string format_significant(double value, int digits);

}  // namespace longdiff::rope
