#include <doctest.h>

#include <cmath>
#include <random>

#include "longdiff/model.hpp"

using namespace longdiff;
using namespace longdiff::model;

namespace {

ModelConfig tiny_config(int layers = 2) {
  ModelConfig c;
  c.vocab_size = 40;
  c.mask_id = 37;
  c.eod_id = 38;
  c.pad_id = 39;
  c.d_model = 32;
  c.n_layers = layers;
  c.n_heads = 4;
  c.head_dim = 8;
  c.max_positions = 16;
  c.rope = {100.0, 8, 16, 16, rope::ScalingMode::VanillaNTK};
  return c;
}

struct Fixture {
  ModelConfig config = tiny_config();
  DiffusionTransformer<double> model{config};
  Parameters<double> params = init_parameters<double>(config, 5, 0.3);
  std::vector<NoisySample> batch;
  std::vector<AttentionMask> masks;

  explicit Fixture(MaskSpec spec = MaskSpec::full()) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<TokenId> tok(0, 36);
    for (int b = 0; b < 2; ++b) {
      std::vector<TokenId> x0(16);
      for (auto& t : x0) t = tok(rng);
      batch.push_back(corrupt(x0, 0.5, rng, config.mask_id));
      masks.emplace_back(spec, 16);
    }
    // Non-unit gains so the normalization backward is exercised.
    std::normal_distribution<double> n(1.0, 0.2);
    for (auto& l : params.layers) {
      for (Eigen::Index i = 0; i < l.attn_norm.size(); ++i) l.attn_norm.data()[i] = n(rng);
      for (Eigen::Index i = 0; i < l.mlp_norm.size(); ++i) l.mlp_norm.data()[i] = n(rng);
    }
  }

  double loss(const Parameters<double>& p) const {
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      total += masked_nll(model.forward(p, batch[b].xt, masks[b]), batch[b]);
    }
    return total / static_cast<double>(batch.size());
  }
};

// Central differences at 10 random coordinates per tensor.
void check_gradients(Fixture& fx, double tolerance) {
  Parameters<double> grad;
  const double loss = batch_loss_and_grad(fx.model, fx.params, fx.batch, fx.masks, grad);
  CHECK(loss == doctest::Approx(fx.loss(fx.params)).epsilon(1e-12));

  std::mt19937_64 rng(99);
  const double h = 1e-4;
  auto params = fx.params.tensors();
  const auto grads = grad.tensors();
  std::vector<std::string> names;
  fx.params.visit([&names](const std::string& name, const Matrix<double>&) { names.push_back(name); });
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::uniform_int_distribution<Eigen::Index> coord(0, params[k]->size() - 1);
    for (int c = 0; c < 10; ++c) {
      const Eigen::Index i = coord(rng);
      double& w = params[k]->data()[i];
      const double saved = w;
      w = saved + h;
      const double up = fx.loss(fx.params);
      w = saved - h;
      const double down = fx.loss(fx.params);
      w = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[k]->data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      INFO(names[k], "[", i, "] analytic=", analytic, " numeric=", numeric);
      CHECK(std::abs(numeric - analytic) / denom < tolerance);
    }
  }
}

}  // namespace

TEST_CASE("finite-difference gradient check, full bidirectional attention") {
  Fixture fx;
  check_gradients(fx, 1e-3);
}

TEST_CASE("finite-difference gradient check, segment block-diagonal attention") {
  Fixture fx(MaskSpec::segments({0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2}));
  check_gradients(fx, 1e-3);
}

TEST_CASE("finite-difference gradient check, causal attention") {
  Fixture fx(MaskSpec::causal());
  check_gradients(fx, 1e-3);
}

TEST_CASE("unused embedding rows receive zero gradient") {
  Fixture fx;
  Parameters<double> grad;
  batch_loss_and_grad(fx.model, fx.params, fx.batch, fx.masks, grad);
  std::vector<bool> used(static_cast<std::size_t>(fx.config.vocab_size), false);
  for (const auto& s : fx.batch) {
    for (const TokenId t : s.xt) used[t] = true;
  }
  int unused = 0;
  for (int v = 0; v < fx.config.vocab_size; ++v) {
    if (used[static_cast<std::size_t>(v)]) continue;
    ++unused;
    CHECK(grad.embedding.row(v).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(unused > 0);
}

TEST_CASE("zero-masked batch gives zero gradient") {
  Fixture fx;
  for (auto& s : fx.batch) {
    s.xt = s.x0;
    s.masked_positions.clear();
  }
  Parameters<double> grad;
  CHECK(batch_loss_and_grad(fx.model, fx.params, fx.batch, fx.masks, grad) == 0.0);
  grad.visit([](const std::string&, const Matrix<double>& m) { CHECK(m.cwiseAbs().maxCoeff() == 0.0); });
}

TEST_CASE("batch gradient does not depend on the worker count") {
  Fixture fx;
  Parameters<double> one;
  Parameters<double> four;
  const double l1 = batch_loss_and_grad(fx.model, fx.params, fx.batch, fx.masks, one, 1);
  const double l4 = batch_loss_and_grad(fx.model, fx.params, fx.batch, fx.masks, four, 4);
  CHECK(l1 == l4);
  const auto a = one.tensors();
  const auto b = four.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(*a[k] == *b[k]);
}
