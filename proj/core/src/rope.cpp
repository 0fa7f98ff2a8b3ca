#include "longdiff/rope.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "longdiff/error.hpp"

namespace longdiff::rope {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_base_and_dim(double base, int head_dim) {
  if (!(base > 1.0) || !std::isfinite(base)) {
    throw ConfigError("rope: base must be finite and > 1");
  }
  if (head_dim < 2 || head_dim % 2 != 0) {
    throw ConfigError("rope: head_dim must be even and >= 2");
  }
}

// ceil() that treats values within a few ulps above an integer as that integer.
double stable_ceil(double x) {
  const double nearest = std::round(x);
  if (std::abs(x - nearest) <= 1e-12 * std::max(1.0, std::abs(x))) {
    return nearest;
  }
  return std::ceil(x);
}

}  // namespace

std::string_view to_string(ScalingMode mode) {
  switch (mode) {
    case ScalingMode::VanillaNTK:
      return "VanillaNTK";
    case ScalingMode::BaselineNTK:
      return "BaselineNTK";
    case ScalingMode::DiffusionNTK:
      return "DiffusionNTK";
  }
  return "unknown";
}

ScalingMode parse_mode(std::string_view text) {
  if (text == "vanilla" || text == "VanillaNTK") return ScalingMode::VanillaNTK;
  if (text == "baseline" || text == "BaselineNTK") return ScalingMode::BaselineNTK;
  if (text == "diffusion" || text == "DiffusionNTK") return ScalingMode::DiffusionNTK;
  throw ConfigError("rope: unknown scaling mode '" + std::string(text) + "'");
}

void RopeConfig::validate() const {
  check_base_and_dim(base, head_dim);
  if (train_context < 1) {
    throw ConfigError("rope: train_context must be >= 1");
  }
  if (target_context < train_context) {
    throw ConfigError("rope: target_context must be >= train_context");
  }
}

std::vector<double> inv_frequencies(double base, int head_dim) {
  check_base_and_dim(base, head_dim);
  std::vector<double> out(static_cast<std::size_t>(head_dim / 2));
  for (int i = 0; i < head_dim / 2; ++i) {
    out[i] = std::pow(base, -2.0 * i / head_dim);
  }
  return out;
}

std::vector<double> periods(double base, int head_dim) {
  check_base_and_dim(base, head_dim);
  std::vector<double> out(static_cast<std::size_t>(head_dim / 2));
  for (int i = 0; i < head_dim / 2; ++i) {
    out[i] = kTwoPi * std::pow(base, 2.0 * i / head_dim);
  }
  return out;
}

CriticalDimension critical_dimension_checked(double base, int head_dim, long span) {
  check_base_and_dim(base, head_dim);
  if (span <= static_cast<long>(std::ceil(kTwoPi))) {
    throw ConfigError("rope: span must exceed ceil(2*pi) tokens for a critical dimension");
  }
  const double exponent = 0.5 * head_dim * (std::log(span / kTwoPi) / std::log(base));
  const double raw = 2.0 * stable_ceil(exponent);
  CriticalDimension result;
  if (raw > head_dim) {
    result.value = head_dim;
    result.clamped = true;
  } else if (raw < 2.0) {
    result.value = 2;
    result.clamped = true;
  } else {
    result.value = static_cast<int>(raw);
  }
  return result;
}

int critical_dimension(double base, int head_dim, long span) {
  return critical_dimension_checked(base, head_dim, span).value;
}

ScalingReport scaling_factor(const RopeConfig& config) {
  config.validate();
  ScalingReport report;
  report.mode = config.mode;
  report.base = config.base;
  report.head_dim = config.head_dim;
  report.scale_ratio =
      static_cast<double>(config.target_context) / static_cast<double>(config.train_context);
  const double d = config.head_dim;

  switch (config.mode) {
    case ScalingMode::VanillaNTK: {
      if (config.head_dim < 4) {
        throw ConfigError("rope: VanillaNTK needs head_dim >= 4 (exponent d/(d-2))");
      }
      report.lambda = std::pow(report.scale_ratio, d / (d - 2.0));
      report.critical_dim = config.head_dim;
      report.span_trained = config.train_context;
      report.span_required = config.target_context;
      break;
    }
    case ScalingMode::BaselineNTK:
    case ScalingMode::DiffusionNTK: {
      const long factor = config.mode == ScalingMode::DiffusionNTK ? 2 : 1;
      report.span_trained = factor * config.train_context;
      report.span_required = factor * config.target_context;
      const auto crit = critical_dimension_checked(config.base, config.head_dim, report.span_trained);
      report.critical_dim = crit.value;
      report.critical_dim_clamped = crit.clamped;
      report.lambda = std::pow(report.span_required / kTwoPi, d / crit.value) / config.base;
      break;
    }
  }

  report.effective_base = report.lambda * config.base;
  report.periods_before = periods(config.base, config.head_dim);
  report.periods.resize(report.periods_before.size());
  for (int i = 0; i < config.head_dim / 2; ++i) {
    report.periods[i] = kTwoPi * std::pow(report.effective_base, 2.0 * i / d);
  }
  report.critical_period = kTwoPi * std::pow(report.effective_base, report.critical_dim / d);

  for (int i = 0; i < config.head_dim / 2; ++i) {
    if (report.periods_before[i] <= static_cast<double>(report.span_trained)) {
      report.last_pair_within_span = i;
    } else if (!report.first_pair_beyond_span) {
      report.first_pair_beyond_span = i;
    }
  }
  return report;
}

RotaryTable::RotaryTable(double effective_base, int head_dim, long max_position)
    : effective_base_(effective_base),
      head_dim_(head_dim),
      half_(static_cast<std::size_t>(head_dim / 2)),
      max_position_(max_position) {
  if (max_position < 0) {
    throw ConfigError("rope: max_position must be non-negative");
  }
  inv_freq_ = inv_frequencies(effective_base, head_dim);
  const auto rows = static_cast<std::size_t>(max_position) + 1;
  cos_.resize(rows * half_);
  sin_.resize(rows * half_);
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t i = 0; i < half_; ++i) {
      const double a = static_cast<double>(p) * inv_freq_[i];
      cos_[p * half_ + i] = std::cos(a);
      sin_[p * half_ + i] = std::sin(a);
    }
  }
}

double RotaryTable::angle(long position, int pair) const {
  if (position < 0 || position > max_position_ || pair < 0 ||
      static_cast<std::size_t>(pair) >= half_) {
    throw ConfigError("rope: angle index out of range");
  }
  return static_cast<double>(position) * inv_freq_[pair];
}

template <typename Scalar>
void rotate_in_place(std::span<Scalar> v, long position, const RotaryTable& table, bool inverse) {
  const std::size_t half = v.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const auto c = static_cast<Scalar>(table.cos_at(position, static_cast<int>(i)));
    auto s = static_cast<Scalar>(table.sin_at(position, static_cast<int>(i)));
    if (inverse) s = -s;
    const Scalar x = v[2 * i];
    const Scalar y = v[2 * i + 1];
    v[2 * i] = x * c - y * s;
    v[2 * i + 1] = x * s + y * c;
  }
}

template void rotate_in_place<float>(std::span<float>, long, const RotaryTable&, bool);
template void rotate_in_place<double>(std::span<double>, long, const RotaryTable&, bool);

std::vector<double> apply_rotary(std::span<const double> vector, long position,
                                 const RotaryTable& table) {
  if (static_cast<int>(vector.size()) != table.head_dim()) {
    throw ConfigError("rope: vector length does not match head_dim");
  }
  if (position < 0 || position > table.max_position()) {
    throw ConfigError("rope: position out of range of the rotary table");
  }
  std::vector<double> out(vector.begin(), vector.end());
  rotate_in_place<double>(out, position, table);
  return out;
}

std::string format_significant(double value, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, value);
  return buf;
}

RopeReport rope_report(const RopeConfig& config) {
  RopeReport out;
  out.scaling = scaling_factor(config);
  const auto& r = out.scaling;

  std::string csv = "pair_index,dimension,period_before,period_after,covers_T_Ecap\n";
  for (std::size_t i = 0; i < r.periods.size(); ++i) {
    csv += std::to_string(i) + "," + std::to_string(2 * i) + "," +
           format_significant(r.periods_before[i], 9) + "," + format_significant(r.periods[i], 9) +
           "," + (r.periods[i] >= static_cast<double>(r.span_required) ? "true" : "false") + "\n";
  }
  out.csv = std::move(csv);

  // Hand-assembled so every number carries exactly 9 significant digits.
  const auto num = [](double v) { return format_significant(v, 9); };
  std::string periods_json = "[";
  for (std::size_t i = 0; i < r.periods.size(); ++i) {
    if (i) periods_json += ",";
    periods_json += num(r.periods[i]);
  }
  periods_json += "]";
  const auto opt = [](const std::optional<int>& v) {
    return v ? std::to_string(*v) : std::string("null");
  };
  std::string json = "{\n";
  json += "  \"mode\": \"" + std::string(to_string(r.mode)) + "\",\n";
  json += "  \"base\": " + num(r.base) + ",\n";
  json += "  \"head_dim\": " + std::to_string(r.head_dim) + ",\n";
  json += "  \"train_context\": " + std::to_string(config.train_context) + ",\n";
  json += "  \"target_context\": " + std::to_string(config.target_context) + ",\n";
  json += "  \"lambda\": " + num(r.lambda) + ",\n";
  json += "  \"critical_dim\": " + std::to_string(r.critical_dim) + ",\n";
  json += "  \"critical_dim_clamped\": " + std::string(r.critical_dim_clamped ? "true" : "false") + ",\n";
  json += "  \"effective_base\": " + num(r.effective_base) + ",\n";
  json += "  \"span_trained\": " + std::to_string(r.span_trained) + ",\n";
  json += "  \"span_required\": " + std::to_string(r.span_required) + ",\n";
  json += "  \"scale_ratio\": " + num(r.scale_ratio) + ",\n";
  json += "  \"critical_period\": " + num(r.critical_period) + ",\n";
  json += "  \"last_pair_within_span\": " + opt(r.last_pair_within_span) + ",\n";
  json += "  \"first_pair_beyond_span\": " + opt(r.first_pair_beyond_span) + ",\n";
  json += "  \"periods\": " + periods_json + "\n";
  json += "}\n";
  out.json = std::move(json);
  return out;
}

}  // namespace longdiff::rope
