#include "longdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <json.hpp>

#include "longdiff/corpus_io.hpp"
#include "longdiff/error.hpp"

namespace longdiff {

using nlohmann::json;

namespace {

json config_json(const model::ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"mask_id", c.mask_id},
          {"eod_id", c.eod_id},
          {"pad_id", c.pad_id},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},
          {"max_positions", c.max_positions},
          {"mlp_multiplier", c.mlp_multiplier},
          {"rope",
           {{"base", c.rope.base},
            {"head_dim", c.rope.head_dim},
            {"train_context", c.rope.train_context},
            {"target_context", c.rope.target_context},
            {"mode", std::string(rope::to_string(c.rope.mode))}}}};
}

model::ModelConfig config_from(const json& j) {
  model::ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.mask_id = j.at("mask_id").get<TokenId>();
  c.eod_id = j.at("eod_id").get<TokenId>();
  c.pad_id = j.at("pad_id").get<TokenId>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.max_positions = j.at("max_positions").get<long>();
  c.mlp_multiplier = j.at("mlp_multiplier").get<int>();
  const auto& r = j.at("rope");
  c.rope.base = r.at("base").get<double>();
  c.rope.head_dim = r.at("head_dim").get<int>();
  c.rope.train_context = r.at("train_context").get<long>();
  c.rope.target_context = r.at("target_context").get<long>();
  c.rope.mode = rope::parse_mode(r.at("mode").get<std::string>());
  c.validate();
  return c;
}

void append_tensor(std::string& out, const model::Matrix<float>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    io::append_u32_le(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  }
}

}  // namespace

std::string model_config_to_json(const model::ModelConfig& config) {
  return config_json(config).dump(2);
}

model::ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  model::check_shapes(ckpt.config, ckpt.params);
  json tensors = json::array();
  std::string payload;
  const auto add_group = [&](const model::Parameters<float>& p, const char* group) {
    p.visit([&](const std::string& name, const model::Matrix<float>& m) {
      tensors.push_back({{"name", name},
                         {"group", group},
                         {"shape", {m.rows(), m.cols()}},
                         {"offset", payload.size()}});
      append_tensor(payload, m);
    });
  };
  add_group(ckpt.params, "params");
  if (ckpt.optim) {
    add_group(ckpt.optim->first_moment, "adam_m");
    add_group(ckpt.optim->second_moment, "adam_v");
  }
  json metadata;
  try {
    metadata = json::parse(ckpt.metadata);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: metadata is not JSON: ") + e.what());
  }
  json header = {{"format", kCheckpointFormat},
                 {"model", config_json(ckpt.config)},
                 {"step", ckpt.step},
                 {"rng", {{"scheme", "counter"}, {"seed", ckpt.seed}}},
                 {"optim_step", ckpt.optim ? json(ckpt.optim->step) : json(nullptr)},
                 {"dtype", "float32-le"},
                 {"tensors", tensors},
                 {"metadata", metadata}};
  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const auto n = static_cast<std::uint64_t>(header_text.size());
  io::append_u32_le(out, static_cast<std::uint32_t>(n & 0xFFFFFFFFu));
  io::append_u32_le(out, static_cast<std::uint32_t>(n >> 32));
  out += header_text;
  out += payload;
  io::write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a longdiff checkpoint");
  }
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len =
      io::read_u32_le(u + 8) | (static_cast<std::uint64_t>(io::read_u32_le(u + 12)) << 32);
  if (16 + header_len > bytes.size()) {
    throw IoError("'" + path.string() + "' has a truncated header");
  }
  const std::size_t payload_begin = 16 + static_cast<std::size_t>(header_len);
  Checkpoint ckpt;
  try {
    const json header = json::parse(bytes.substr(16, static_cast<std::size_t>(header_len)));
    if (header.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError("'" + path.string() + "' has unsupported format tag");
    }
    ckpt.config = config_from(header.at("model"));
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.seed = header.at("rng").at("seed").get<std::uint64_t>();
    ckpt.metadata = header.at("metadata").dump();

    ckpt.params = model::init_parameters<float>(ckpt.config, 0, 0.0);
    const bool has_optim = !header.at("optim_step").is_null();
    if (has_optim) {
      ckpt.optim = train::OptimState::zeros_like(ckpt.params);
      ckpt.optim->step = header.at("optim_step").get<std::int64_t>();
    }
    std::map<std::string, model::Matrix<float>*> slots;
    const auto register_group = [&](model::Parameters<float>& p, const std::string& group) {
      p.visit([&](const std::string& name, model::Matrix<float>& m) { slots[group + "/" + name] = &m; });
    };
    register_group(ckpt.params, "params");
    if (has_optim) {
      register_group(ckpt.optim->first_moment, "adam_m");
      register_group(ckpt.optim->second_moment, "adam_v");
    }
    std::size_t filled = 0;
    for (const auto& t : header.at("tensors")) {
      const std::string key = t.at("group").get<std::string>() + "/" + t.at("name").get<std::string>();
      auto it = slots.find(key);
      if (it == slots.end()) {
        throw IoError("'" + path.string() + "' has unexpected tensor '" + key + "'");
      }
      auto& m = *it->second;
      const auto rows = t.at("shape").at(0).get<Eigen::Index>();
      const auto cols = t.at("shape").at(1).get<Eigen::Index>();
      if (rows != m.rows() || cols != m.cols()) {
        throw IoError("'" + path.string() + "' tensor '" + key + "' has the wrong shape");
      }
      const std::size_t offset = payload_begin + t.at("offset").get<std::size_t>();
      if (offset + static_cast<std::size_t>(m.size()) * 4 > bytes.size()) {
        throw IoError("'" + path.string() + "' payload is truncated");
      }
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = std::bit_cast<float>(io::read_u32_le(u + offset + 4 * static_cast<std::size_t>(i)));
      }
      ++filled;
    }
    if (filled != slots.size()) {
      throw IoError("'" + path.string() + "' is missing tensors");
    }
  } catch (const json::exception& e) {
    throw IoError("'" + path.string() + "' has a malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("'" + path.string() + "' has an invalid model config: " + e.what());
  }
  return ckpt;
}

}  // namespace longdiff
