#include "longdiff/vocab.hpp"

namespace longdiff {

std::vector<TokenId> encode_bytes(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (const char c : text) {
    out.push_back(static_cast<unsigned char>(c));
  }
  return out;
}

std::string decode_bytes(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (const TokenId t : tokens) {
    if (t < 256) {
      out.push_back(static_cast<char>(t));
    } else if (t == vocab::kMaskId) {
      out += "<mask>";
    } else if (t == vocab::kEodId) {
      out += "<eod>";
    } else if (t == vocab::kPadId) {
      out += "<pad>";
    } else {
      out += "<?>";
    }
  }
  return out;
}

}  // namespace longdiff
