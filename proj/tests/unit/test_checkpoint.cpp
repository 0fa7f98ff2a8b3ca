#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "longdiff/checkpoint.hpp"
#include "longdiff/corpus_io.hpp"
#include "longdiff/error.hpp"


using namespace longdiff;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("longdiff_ckpt_" + name);
}

model::ModelConfig config() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.n_layers = 1;
  c.max_positions = 64;
  c.rope = {500.0, 8, 32, 64, rope::ScalingMode::DiffusionNTK};
  return c;
}

}  // namespace

TEST_CASE("checkpoint round-trip is exact") {
  Checkpoint ckpt{config(), model::init_parameters<float>(config(), 3), 17, 99, std::nullopt,
                  R"({"note":"x"})"};
  ckpt.optim = train::OptimState::zeros_like(ckpt.params);
  ckpt.optim->step = 17;
  ckpt.optim->first_moment.head(1, 2) = 0.25f;
  ckpt.optim->second_moment.embedding(0, 0) = 3.5f;
  const auto path = temp_file("roundtrip");
  save_checkpoint(ckpt, path);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);

  CHECK(back.step == 17);
  CHECK(back.seed == 99);
  CHECK(back.config.rope.mode == rope::ScalingMode::DiffusionNTK);
  CHECK(back.config.rope.target_context == 64);
  CHECK(back.config.rope.base == 500.0);
  CHECK(back.config.max_positions == 64);
  CHECK(nlohmann::json::parse(back.metadata) == nlohmann::json::parse(ckpt.metadata));
  const auto a = ckpt.params.tensors();
  const auto b = back.params.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(*a[k] == *b[k]);
  REQUIRE(back.optim.has_value());
  CHECK(back.optim->step == 17);
  CHECK(back.optim->first_moment.head(1, 2) == 0.25f);
  CHECK(back.optim->second_moment.embedding(0, 0) == 3.5f);
}

TEST_CASE("checkpoint without optimizer state") {
  Checkpoint ckpt{config(), model::init_parameters<float>(config(), 4), 0, 0, std::nullopt, "{}"};
  const auto path = temp_file("noopt");
  save_checkpoint(ckpt, path);
  CHECK_FALSE(load_checkpoint(path).optim.has_value());
  std::filesystem::remove(path);
}

TEST_CASE("saving is byte-deterministic") {
  Checkpoint ckpt{config(), model::init_parameters<float>(config(), 5), 3, 1, std::nullopt, "{}"};
  const auto p1 = temp_file("det1");
  const auto p2 = temp_file("det2");
  save_checkpoint(ckpt, p1);
  save_checkpoint(ckpt, p2);
  CHECK(io::read_file(p1) == io::read_file(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("corrupted checkpoints are rejected") {
  Checkpoint ckpt{config(), model::init_parameters<float>(config(), 6), 0, 0, std::nullopt, "{}"};
  const auto path = temp_file("bad");
  save_checkpoint(ckpt, path);
  const std::string good = io::read_file(path);

  io::write_file(path, "NOTACKPT" + good.substr(8));
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  io::write_file(path, good.substr(0, good.size() - 5));
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  io::write_file(path, good.substr(0, 12));
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("model config JSON round-trip") {
  const auto c = config();
  const auto back = model_config_from_json(model_config_to_json(c));
  CHECK(back.d_model == c.d_model);
  CHECK(back.n_layers == c.n_layers);
  CHECK(back.rope.train_context == c.rope.train_context);
  CHECK(back.mask_id == c.mask_id);
  CHECK_THROWS_AS(model_config_from_json(R"({"d_model": 16})"), ConfigError);
}
