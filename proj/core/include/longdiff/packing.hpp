#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace longdiff {

using TokenId = std::uint32_t;

struct Document {
  std::string doc_id;
  std::vector<TokenId> tokens;
};

enum class PackStrategy { DirectCat, EodCat, AdaptiveMask };

std::string_view to_string(PackStrategy strategy);
/// Accepts "direct", "eod", "adaptive" or the enumerator names.
PackStrategy parse_strategy(std::string_view text);

struct SpecialTokens {
  TokenId eod_id = 0;
  // When set, documents containing this id are rejected.
  std::optional<TokenId> mask_id;
};

/// Maps destination range [dest_start, dest_start + (source_end - source_start))
/// of a packed sequence back to tokens [source_start, source_end) of a document.
struct ProvenanceSpan {
  std::string doc_id;
  std::size_t doc_index = 0;  // ordinal of the document in the input stream
  std::size_t source_start = 0;
  std::size_t source_end = 0;
  std::size_t dest_start = 0;

  [[nodiscard]] std::size_t length() const { return source_end - source_start; }
  bool operator==(const ProvenanceSpan&) const = default;
};

struct PackedSequence {
  std::vector<TokenId> tokens;
  std::vector<std::uint32_t> segment_ids;
  PackStrategy strategy = PackStrategy::DirectCat;
  std::vector<ProvenanceSpan> provenance;

  bool operator==(const PackedSequence&) const = default;
};

struct PackConfig {
  std::size_t target_len = 0;
  PackStrategy strategy = PackStrategy::DirectCat;
  SpecialTokens special;
};

struct PackStats {
  std::size_t documents = 0;
  std::size_t sequences = 0;
  std::size_t input_tokens = 0;
  // Document (non-EOD) tokens written into emitted sequences.
  std::size_t emitted_tokens = 0;
  // Document tokens that were in the dropped underfull trailer.
  std::size_t dropped_tokens = 0;
  std::size_t eod_tokens = 0;
};

/// Streaming packer. Documents are consumed in order; every completed sequence is
/// handed to the sink immediately. finish() discards the underfull trailer.
class Packer {
 public:
  using Sink = std::function<void(PackedSequence&&)>;

  Packer(PackConfig config, Sink sink);

  void push(const Document& doc);
  /// Drops the trailing underfull sequence and returns the final counters.
  PackStats finish();

  [[nodiscard]] const PackStats& stats() const { return stats_; }

 private:
  void emit();

  PackConfig config_;
  Sink sink_;
  PackedSequence current_;
  std::uint32_t next_segment_ = 0;
  std::size_t current_doc_tokens_ = 0;
  PackStats stats_;
  bool finished_ = false;
};

std::vector<PackedSequence> pack(std::span<const Document> corpus, const PackConfig& config,
                                 PackStats* stats = nullptr);

/// Throws ConfigError describing the first broken invariant.
void validate_sequence(const PackedSequence& seq, std::size_t target_len, TokenId eod_id);

struct Fragment {
  std::string doc_id;
  std::size_t doc_index = 0;
  std::size_t source_start = 0;
  std::vector<TokenId> tokens;
};

/// Inverse of pack for one sequence. Throws ConfigError on corrupted provenance.
std::vector<Fragment> unpack(const PackedSequence& seq);

/// Concatenates fragments per document, requiring them to be contiguous and in order.
std::map<std::size_t, std::vector<TokenId>> reassemble(std::span<const Fragment> fragments);

// ---------------------------------------------------------------------------
// Attention permissions

enum class MaskKind { Causal, FullBidirectional, SegmentBlockDiagonal };

std::string_view to_string(MaskKind kind);

struct MaskSpec {
  MaskKind kind = MaskKind::FullBidirectional;
  std::vector<std::uint32_t> segment_ids;  // only for SegmentBlockDiagonal

  static MaskSpec causal() { return {MaskKind::Causal, {}}; }
  static MaskSpec full() { return {MaskKind::FullBidirectional, {}}; }
  static MaskSpec segments(std::vector<std::uint32_t> ids) {
    return {MaskKind::SegmentBlockDiagonal, std::move(ids)};
  }
};

/// AdaptiveMask -> SegmentBlockDiagonal over the sequence's segments; others -> FullBidirectional.
MaskSpec mask_for(const PackedSequence& seq);

/// Largest length for which a dense boolean matrix may be materialized.
inline constexpr std::size_t kMaxDenseMaskLength = 4096;

struct Block {
  std::size_t begin = 0;
  std::size_t end = 0;
};

class AttentionMask {
 public:
  AttentionMask(MaskSpec spec, std::size_t length);

  [[nodiscard]] bool allowed(std::size_t query, std::size_t key) const;
  [[nodiscard]] std::size_t length() const { return length_; }
  [[nodiscard]] MaskKind kind() const { return spec_.kind; }
  [[nodiscard]] const MaskSpec& spec() const { return spec_; }

  /// Contiguous ranges such that no query attends outside its own range.
  [[nodiscard]] const std::vector<Block>& blocks() const { return blocks_; }

  /// Row-major L x L, 1 = allowed. Throws ConfigError above kMaxDenseMaskLength.
  [[nodiscard]] std::vector<std::uint8_t> dense() const;

 private:
  MaskSpec spec_;
  std::size_t length_ = 0;
  std::vector<Block> blocks_;
};

AttentionMask build_mask(const MaskSpec& spec, std::size_t length);

/// Fraction of allowed (query, key) pairs, computed without materializing the matrix.
double mask_density(const MaskSpec& spec, std::size_t length);

}  // namespace longdiff
