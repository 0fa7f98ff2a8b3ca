#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "longdiff/packing.hpp"

namespace longdiff {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three reserved ids.
namespace vocab {
inline constexpr TokenId kMaskId = 256;
inline constexpr TokenId kEodId = 257;
inline constexpr TokenId kPadId = 258;
inline constexpr int kByteVocabSize = 259;
}  // namespace vocab

std::vector<TokenId> encode_bytes(std::string_view text);

/// Reserved ids decode to "<mask>", "<eod>", "<pad>"; other out-of-range ids to "<?>".
std::string decode_bytes(std::span<const TokenId> tokens);

}  // namespace longdiff
