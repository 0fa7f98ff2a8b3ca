#include "longdiff/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "longdiff/error.hpp"
#include "longdiff/parallel.hpp"

namespace longdiff::model {

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || head_dim <= 0 ||
      max_positions <= 0 || mlp_multiplier <= 0) {
    throw ConfigError("model: sizes must be positive");
  }
  if (head_dim % 2 != 0) {
    throw ConfigError("model: head_dim must be even");
  }
  if (n_heads * head_dim != d_model) {
    throw ConfigError("model: n_heads * head_dim must equal d_model");
  }
  const auto K = static_cast<TokenId>(vocab_size);
  if (mask_id >= K || eod_id >= K || pad_id >= K || mask_id == eod_id || mask_id == pad_id ||
      eod_id == pad_id) {
    throw ConfigError("model: reserved ids must be distinct and below vocab_size");
  }
  if (rope.head_dim != head_dim) {
    throw ConfigError("model: rope.head_dim must equal head_dim");
  }
  rope.validate();
}

double ModelConfig::effective_base() const { return rope::scaling_factor(rope).effective_base; }

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
std::vector<Matrix<T>*> Parameters<T>::tensors() {
  std::vector<Matrix<T>*> out;
  visit([&out](const std::string&, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> Parameters<T>::tensors() const {
  std::vector<const Matrix<T>*> out;
  visit([&out](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::size_t Parameters<T>::count() const {
  std::size_t n = 0;
  visit([&n](const std::string&, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename T>
bool Parameters<T>::all_finite() const {
  bool ok = true;
  visit([&ok](const std::string&, const Matrix<T>& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <typename T>
void Parameters<T>::set_zero() {
  visit([](const std::string&, Matrix<T>& m) { m.setZero(); });
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like() const {
  Parameters out = *this;
  out.set_zero();
  return out;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.embedding = embedding.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    auto& b = out.layers[l];
    b.attn_norm = a.attn_norm.template cast<U>();
    b.wq = a.wq.template cast<U>();
    b.wk = a.wk.template cast<U>();
    b.wv = a.wv.template cast<U>();
    b.wo = a.wo.template cast<U>();
    b.mlp_norm = a.mlp_norm.template cast<U>();
    b.w1 = a.w1.template cast<U>();
    b.w2 = a.w2.template cast<U>();
  }
  out.final_norm = final_norm.template cast<U>();
  out.head = head.template cast<U>();
  return out;
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed, double init_std) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  const auto gaussian = [&](int rows, int cols) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng));
    return m;
  };
  const auto ones = [](int cols) { return Matrix<T>::Ones(1, cols); };
  const int D = config.d_model;
  const int F = config.mlp_dim();
  Parameters<T> p;
  p.embedding = gaussian(config.vocab_size, D);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.attn_norm = ones(D);
    layer.wq = gaussian(D, D);
    layer.wk = gaussian(D, D);
    layer.wv = gaussian(D, D);
    layer.wo = gaussian(D, D);
    layer.mlp_norm = ones(D);
    layer.w1 = gaussian(D, F);
    layer.w2 = gaussian(F, D);
  }
  p.final_norm = ones(D);
  p.head = gaussian(D, config.vocab_size);
  return p;
}

template <typename T>
void check_shapes(const ModelConfig& config, const Parameters<T>& p) {
  const int D = config.d_model;
  const int F = config.mlp_dim();
  const auto expect = [](const Matrix<T>& m, Eigen::Index r, Eigen::Index c, const char* what) {
    if (m.rows() != r || m.cols() != c) {
      throw ConfigError(std::string("model: tensor '") + what + "' has shape " +
                        std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                        std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(p.embedding, config.vocab_size, D, "embedding");
  if (p.layers.size() != static_cast<std::size_t>(config.n_layers)) {
    throw ConfigError("model: layer count does not match config");
  }
  for (const auto& layer : p.layers) {
    expect(layer.attn_norm, 1, D, "attn_norm");
    expect(layer.wq, D, D, "wq");
    expect(layer.wk, D, D, "wk");
    expect(layer.wv, D, D, "wv");
    expect(layer.wo, D, D, "wo");
    expect(layer.mlp_norm, 1, D, "mlp_norm");
    expect(layer.w1, D, F, "w1");
    expect(layer.w2, F, D, "w2");
  }
  expect(p.final_norm, 1, D, "final_norm");
  expect(p.head, D, config.vocab_size, "head");
}

// ---------------------------------------------------------------------------
// Corruption and loss

NoisySample corrupt(std::span<const TokenId> x0, double t, std::mt19937_64& rng, TokenId mask_id) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("corrupt: t must lie in [0, 1]");
  }
  NoisySample s;
  s.x0.assign(x0.begin(), x0.end());
  s.xt = s.x0;
  s.t = t;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < s.x0.size(); ++i) {
    if (s.x0[i] == mask_id) {
      throw ConfigError("corrupt: clean sequence contains the mask id");
    }
    if (u(rng) < t) {
      s.xt[i] = mask_id;
      s.masked_positions.push_back(i);
    }
  }
  return s;
}

template <typename T>
Matrix<double> softmax_rows(const Matrix<T>& logits) {
  Matrix<double> out = logits.template cast<double>();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

namespace {

double loss_weight(const NoisySample& sample, LossWeighting weighting) {
  if (sample.masked_positions.empty()) return 0.0;
  if (weighting == LossWeighting::InverseT) {
    return 1.0 / (sample.t * static_cast<double>(sample.x0.size()));
  }
  return 1.0 / static_cast<double>(sample.masked_positions.size());
}

template <typename Row>
double row_nll(const Row& row, TokenId target) {
  const double m = static_cast<double>(row.maxCoeff());
  double z = 0.0;
  for (Eigen::Index k = 0; k < row.size(); ++k) z += std::exp(static_cast<double>(row[k]) - m);
  return m + std::log(z) - static_cast<double>(row[target]);
}

}  // namespace

template <typename T>
double masked_nll(const Matrix<T>& logits, const NoisySample& sample, LossWeighting weighting) {
  if (static_cast<std::size_t>(logits.rows()) != sample.x0.size()) {
    throw ConfigError("loss: logits rows do not match sample length");
  }
  const double w = loss_weight(sample, weighting);
  double total = 0.0;
  for (const std::size_t i : sample.masked_positions) {
    if (sample.x0[i] >= static_cast<TokenId>(logits.cols())) {
      throw ConfigError("loss: target id out of vocabulary");
    }
    total += row_nll(logits.row(static_cast<Eigen::Index>(i)), sample.x0[i]);
  }
  return total * w;
}

// ---------------------------------------------------------------------------
// Transformer

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
void rms_forward(const Matrix<T>& x, const Matrix<T>& gain, Matrix<T>& y, std::vector<T>& rms) {
  const Eigen::Index L = x.rows();
  const Eigen::Index D = x.cols();
  y.resize(L, D);
  rms.resize(static_cast<std::size_t>(L));
  for (Eigen::Index i = 0; i < L; ++i) {
    const T r = std::sqrt(x.row(i).squaredNorm() / static_cast<T>(D) + static_cast<T>(kNormEps));
    rms[static_cast<std::size_t>(i)] = r;
    y.row(i) = (x.row(i).array() / r * gain.array()).matrix();
  }
}

// Accumulates into dx and dgain.
template <typename T>
void rms_backward(const Matrix<T>& x, const Matrix<T>& gain, const std::vector<T>& rms,
                  const Matrix<T>& dy, Matrix<T>& dx, Matrix<T>& dgain) {
  const Eigen::Index L = x.rows();
  const auto D = static_cast<T>(x.cols());
  for (Eigen::Index i = 0; i < L; ++i) {
    const T r = rms[static_cast<std::size_t>(i)];
    dgain.row(0).array() += dy.row(i).array() * x.row(i).array() / r;
    const auto gd = (dy.row(i).array() * gain.row(0).array()).matrix();
    const T dot = gd.dot(x.row(i));
    dx.row(i).array() += gd.array() / r - x.row(i).array() * (dot / (D * r * r * r));
  }
}

template <typename T>
T gelu(T u) {
  return static_cast<T>(0.5) * u * (static_cast<T>(1) + std::erf(u * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T u) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(u * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * u * u) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + u * pdf;
}

}  // namespace

template <typename T>
struct DiffusionTransformer<T>::Cache {
  struct Layer {
    Matrix<T> x_in, h1, q, k, v, o, x_mid, h2, u, a;
    std::vector<T> rms1, rms2;
    // probs[head][block]
    std::vector<std::vector<Matrix<T>>> probs;
  };
  std::vector<Layer> layers;
  Matrix<T> x_final, hf;
  std::vector<T> rmsf;
};

template <typename T>
DiffusionTransformer<T>::DiffusionTransformer(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  rotary_ = rope::RotaryTable(config_.effective_base(), config_.head_dim, config_.max_positions);
}

template <typename T>
Matrix<T> DiffusionTransformer<T>::run(const Parameters<T>& params, std::span<const TokenId> tokens,
                                       const AttentionMask& mask, Cache* cache) const {
  const auto L = static_cast<Eigen::Index>(tokens.size());
  if (L == 0) {
    throw ConfigError("model: empty input");
  }
  if (static_cast<long>(L) > config_.max_positions) {
    throw ConfigError("model: input length " + std::to_string(L) + " exceeds max_positions " +
                      std::to_string(config_.max_positions));
  }
  if (mask.length() != tokens.size()) {
    throw ConfigError("model: mask length does not match input length");
  }
  check_shapes(config_, params);
  if (!params.all_finite()) {
    throw NumericalError("model: parameters contain non-finite values");
  }

  const int D = config_.d_model;
  const int H = config_.n_heads;
  const int dh = config_.head_dim;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const bool causal = mask.kind() == MaskKind::Causal;

  Matrix<T> x(L, D);
  for (Eigen::Index i = 0; i < L; ++i) {
    const TokenId tok = tokens[static_cast<std::size_t>(i)];
    if (tok >= static_cast<TokenId>(config_.vocab_size)) {
      throw ConfigError("model: token id " + std::to_string(tok) + " outside vocabulary");
    }
    x.row(i) = params.embedding.row(tok);
  }
  if (cache) cache->layers.resize(params.layers.size());

  Matrix<T> h1, h2, q, k, v, o, u, a;
  std::vector<T> rms1, rms2;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& P = params.layers[l];
    rms_forward(x, P.attn_norm, h1, rms1);
    q.noalias() = h1 * P.wq;
    k.noalias() = h1 * P.wk;
    v.noalias() = h1 * P.wv;
    for (Eigen::Index i = 0; i < L; ++i) {
      for (int h = 0; h < H; ++h) {
        rope::rotate_in_place<T>(std::span<T>(q.data() + i * D + h * dh, dh), i, rotary_);
        rope::rotate_in_place<T>(std::span<T>(k.data() + i * D + h * dh, dh), i, rotary_);
      }
    }
    o.resize(L, D);
    std::vector<std::vector<Matrix<T>>> probs;
    if (cache) probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      for (const auto& blk : mask.blocks()) {
        const auto s0 = static_cast<Eigen::Index>(blk.begin);
        const auto n = static_cast<Eigen::Index>(blk.end - blk.begin);
        // Contiguous copies: Eigen's strided-block product is several times slower.
        const Matrix<T> qh = q.block(s0, h * dh, n, dh);
        const Matrix<T> kh = k.block(s0, h * dh, n, dh);
        Matrix<T> S(n, n);
        S.noalias() = qh * kh.transpose();
        S *= scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (causal) {
            for (Eigen::Index j = i + 1; j < n; ++j) S(i, j) = neg_inf;
          }
          auto row = S.row(i);
          row.array() -= row.maxCoeff();
          row = row.array().exp().matrix();
          row /= row.sum();
        }
        o.block(s0, h * dh, n, dh).noalias() = S * v.block(s0, h * dh, n, dh);
        if (cache) probs[static_cast<std::size_t>(h)].push_back(std::move(S));
      }
    }
    if (cache) {
      auto& C = cache->layers[l];
      C.x_in = x;
      C.h1 = h1;
      C.rms1 = rms1;
      C.q = q;
      C.k = k;
      C.v = v;
      C.o = o;
      C.probs = std::move(probs);
    }
    x.noalias() += o * P.wo;

    rms_forward(x, P.mlp_norm, h2, rms2);
    u.noalias() = h2 * P.w1;
    a = u.unaryExpr([](T z) { return gelu(z); });
    if (cache) {
      auto& C = cache->layers[l];
      C.x_mid = x;
      C.h2 = h2;
      C.rms2 = rms2;
      C.u = u;
      C.a = a;
    }
    x.noalias() += a * P.w2;
  }

  Matrix<T> hf;
  std::vector<T> rmsf;
  rms_forward(x, params.final_norm, hf, rmsf);
  Matrix<T> logits = hf * params.head;
  if (cache) {
    cache->x_final = std::move(x);
    cache->hf = std::move(hf);
    cache->rmsf = std::move(rmsf);
  }
  return logits;
}

template <typename T>
Matrix<T> DiffusionTransformer<T>::forward(const Parameters<T>& params, std::span<const TokenId> tokens,
                                           const AttentionMask& mask) const {
  return run(params, tokens, mask, nullptr);
}

template <typename T>
double DiffusionTransformer<T>::loss_and_grad(const Parameters<T>& params, const NoisySample& sample,
                                              const AttentionMask& mask, Parameters<T>& grad,
                                              double scale, LossWeighting weighting) const {
  if (sample.xt.size() != sample.x0.size()) {
    throw ConfigError("loss: x_t and x0 lengths differ");
  }
  if (sample.masked_positions.empty()) {
    return 0.0;
  }
  Cache cache;
  const Matrix<T> logits = run(params, sample.xt, mask, &cache);
  const double loss = masked_nll(logits, sample, weighting);
  if (!std::isfinite(loss)) {
    throw NumericalError("loss: non-finite value");
  }

  const auto L = static_cast<Eigen::Index>(sample.x0.size());
  const int D = config_.d_model;
  const int H = config_.n_heads;
  const int dh = config_.head_dim;
  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T w = static_cast<T>(loss_weight(sample, weighting) * scale);

  Matrix<T> dlogits = Matrix<T>::Zero(L, config_.vocab_size);
  for (const std::size_t pos : sample.masked_positions) {
    const auto i = static_cast<Eigen::Index>(pos);
    auto row = dlogits.row(i);
    row = logits.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
    row[sample.x0[pos]] -= static_cast<T>(1);
    row *= w;
  }

  grad.head.noalias() += cache.hf.transpose() * dlogits;
  Matrix<T> dh_final = dlogits * params.head.transpose();
  Matrix<T> dx = Matrix<T>::Zero(L, D);
  rms_backward(cache.x_final, params.final_norm, cache.rmsf, dh_final, dx, grad.final_norm);

  Matrix<T> dtmp, dq, dk, dv, dO;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& P = params.layers[li];
    auto& G = grad.layers[li];
    const auto& C = cache.layers[li];

    // MLP residual branch.
    Matrix<T> da = dx * P.w2.transpose();
    G.w2.noalias() += C.a.transpose() * dx;
    Matrix<T> du = da.binaryExpr(C.u, [](T g, T z) { return g * gelu_grad(z); });
    G.w1.noalias() += C.h2.transpose() * du;
    dtmp.noalias() = du * P.w1.transpose();
    rms_backward(C.x_mid, P.mlp_norm, C.rms2, dtmp, dx, G.mlp_norm);

    // Attention residual branch.
    G.wo.noalias() += C.o.transpose() * dx;
    dO.noalias() = dx * P.wo.transpose();
    dq = Matrix<T>::Zero(L, D);
    dk = Matrix<T>::Zero(L, D);
    dv = Matrix<T>::Zero(L, D);
    for (int h = 0; h < H; ++h) {
      const auto& blocks = mask.blocks();
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto s0 = static_cast<Eigen::Index>(blocks[b].begin);
        const auto n = static_cast<Eigen::Index>(blocks[b].end - blocks[b].begin);
        const Matrix<T>& Pm = C.probs[static_cast<std::size_t>(h)][b];
        const Matrix<T> dOh = dO.block(s0, h * dh, n, dh);
        const Matrix<T> vh = C.v.block(s0, h * dh, n, dh);
        Matrix<T> dP(n, n);
        dP.noalias() = dOh * vh.transpose();
        Matrix<T> part(n, dh);
        part.noalias() = Pm.transpose() * dOh;
        dv.block(s0, h * dh, n, dh) += part;
        const auto rowdot = (dP.array() * Pm.array()).rowwise().sum().eval();
        Matrix<T> dS(n, n);
        dS.array() = Pm.array() * (dP.array().colwise() - rowdot) * attn_scale;
        const Matrix<T> kh = C.k.block(s0, h * dh, n, dh);
        const Matrix<T> qh = C.q.block(s0, h * dh, n, dh);
        part.noalias() = dS * kh;
        dq.block(s0, h * dh, n, dh) += part;
        part.noalias() = dS.transpose() * qh;
        dk.block(s0, h * dh, n, dh) += part;
      }
    }
    for (Eigen::Index i = 0; i < L; ++i) {
      for (int h = 0; h < H; ++h) {
        rope::rotate_in_place<T>(std::span<T>(dq.data() + i * D + h * dh, dh), i, rotary_, true);
        rope::rotate_in_place<T>(std::span<T>(dk.data() + i * D + h * dh, dh), i, rotary_, true);
      }
    }
    G.wq.noalias() += C.h1.transpose() * dq;
    G.wk.noalias() += C.h1.transpose() * dk;
    G.wv.noalias() += C.h1.transpose() * dv;
    dtmp.noalias() = dq * P.wq.transpose();
    dtmp.noalias() += dk * P.wk.transpose();
    dtmp.noalias() += dv * P.wv.transpose();
    rms_backward(C.x_in, P.attn_norm, C.rms1, dtmp, dx, G.attn_norm);
  }

  for (Eigen::Index i = 0; i < L; ++i) {
    grad.embedding.row(sample.xt[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  return loss * scale;
}

template <typename T>
double batch_loss_and_grad(const DiffusionTransformer<T>& model, const Parameters<T>& params,
                           std::span<const NoisySample> batch, std::span<const AttentionMask> masks,
                           Parameters<T>& grad, int threads, LossWeighting weighting) {
  if (batch.empty()) {
    throw ConfigError("grad: batch must be non-empty");
  }
  if (batch.size() != masks.size()) {
    throw ConfigError("grad: batch and mask counts differ");
  }
  grad = params.zeros_like();
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  // Per-sample gradients reduced in sample order, independent of the worker count.
  std::vector<Parameters<T>> per_sample(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    per_sample[i] = params.zeros_like();
    losses[i] = model.loss_and_grad(params, batch[i], masks[i], per_sample[i], scale, weighting);
  });
  auto dst = grad.tensors();
  for (const auto& g : per_sample) {
    const auto src = g.tensors();
    for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] += *src[k];
  }
  double total = 0.0;
  for (const double l : losses) total += l;
  if (!std::isfinite(total)) {
    throw NumericalError("grad: non-finite batch loss");
  }
  return total;
}

template struct Parameters<float>;
template struct Parameters<double>;
template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<float> Parameters<float>::cast<float>() const;
template Parameters<double> Parameters<double>::cast<double>() const;
template Parameters<float> init_parameters<float>(const ModelConfig&, std::uint64_t, double);
template Parameters<double> init_parameters<double>(const ModelConfig&, std::uint64_t, double);
template void check_shapes<float>(const ModelConfig&, const Parameters<float>&);
template void check_shapes<double>(const ModelConfig&, const Parameters<double>&);
template double masked_nll<float>(const Matrix<float>&, const NoisySample&, LossWeighting);
template double masked_nll<double>(const Matrix<double>&, const NoisySample&, LossWeighting);
template Matrix<double> softmax_rows<float>(const Matrix<float>&);
template Matrix<double> softmax_rows<double>(const Matrix<double>&);
template class DiffusionTransformer<float>;
template class DiffusionTransformer<double>;
template double batch_loss_and_grad<float>(const DiffusionTransformer<float>&, const Parameters<float>&,
                                           std::span<const NoisySample>, std::span<const AttentionMask>,
                                           Parameters<float>&, int, LossWeighting);
template double batch_loss_and_grad<double>(const DiffusionTransformer<double>&, const Parameters<double>&,
                                            std::span<const NoisySample>, std::span<const AttentionMask>,
                                            Parameters<double>&, int, LossWeighting);

}  // namespace longdiff::model
