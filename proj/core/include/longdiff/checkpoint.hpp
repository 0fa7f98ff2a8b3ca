#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "longdiff/model.hpp"
#include "longdiff/optim.hpp"

namespace longdiff {

inline constexpr char kCheckpointMagic[8] = {'L', 'D', 'I', 'F', 'F', 'C', 'K', '1'};
inline constexpr const char* kCheckpointFormat = "longdiff-ckpt/1";

/// On disk: 8-byte magic, uint64 LE header length, JSON header, then raw little-endian
/// float32 tensors in the order listed by the header.
struct Checkpoint {
  model::ModelConfig config;
  model::Parameters<float> params;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::optional<train::OptimState> optim;
  // Free-form JSON object text carried through unchanged (training config, provenance).
  std::string metadata = "{}";
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model config <-> JSON text helpers shared with the CLI.
std::string model_config_to_json(const model::ModelConfig& config);
model::ModelConfig model_config_from_json(const std::string& text);

}  // namespace longdiff
