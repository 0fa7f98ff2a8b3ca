#include "longdiff/packing.hpp"

#include <algorithm>
#include <set>

#include "longdiff/error.hpp"

namespace longdiff {

std::string_view to_string(PackStrategy strategy) {
  switch (strategy) {
    case PackStrategy::DirectCat:
      return "DirectCat";
    case PackStrategy::EodCat:
      return "EodCat";
    case PackStrategy::AdaptiveMask:
      return "AdaptiveMask";
  }
  return "unknown";
}

PackStrategy parse_strategy(std::string_view text) {
  if (text == "direct" || text == "DirectCat") return PackStrategy::DirectCat;
  if (text == "eod" || text == "EodCat") return PackStrategy::EodCat;
  if (text == "adaptive" || text == "AdaptiveMask") return PackStrategy::AdaptiveMask;
  throw ConfigError("packing: unknown strategy '" + std::string(text) + "'");
}

std::string_view to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::Causal:
      return "Causal";
    case MaskKind::FullBidirectional:
      return "FullBidirectional";
    case MaskKind::SegmentBlockDiagonal:
      return "SegmentBlockDiagonal";
  }
  return "unknown";
}

Packer::Packer(PackConfig config, Sink sink) : config_(std::move(config)), sink_(std::move(sink)) {
  if (config_.target_len < 2) {
    throw ConfigError("packing: target_len must be >= 2");
  }
  if (config_.special.mask_id && *config_.special.mask_id == config_.special.eod_id) {
    throw ConfigError("packing: eod_id and mask_id must differ");
  }
  current_.strategy = config_.strategy;
}

void Packer::emit() {
  current_.strategy = config_.strategy;
  sink_(std::move(current_));
  current_ = PackedSequence{};
  current_.strategy = config_.strategy;
  next_segment_ = 0;
  current_doc_tokens_ = 0;
  ++stats_.sequences;
}

void Packer::push(const Document& doc) {
  if (finished_) {
    throw ConfigError("packing: push after finish");
  }
  if (doc.tokens.empty()) {
    throw ConfigError("packing: document '" + doc.doc_id + "' is empty");
  }
  const bool eod = config_.strategy == PackStrategy::EodCat;
  for (const TokenId t : doc.tokens) {
    if (config_.special.mask_id && t == *config_.special.mask_id) {
      throw ConfigError("packing: document '" + doc.doc_id + "' contains the mask id");
    }
    if (eod && t == config_.special.eod_id) {
      throw ConfigError("packing: document '" + doc.doc_id + "' contains the eod id");
    }
  }

  const std::size_t doc_index = stats_.documents++;
  stats_.input_tokens += doc.tokens.size();
  const std::size_t stream_len = doc.tokens.size() + (eod ? 1 : 0);
  const std::size_t target = config_.target_len;

  std::size_t pos = 0;
  while (pos < stream_len) {
    const std::size_t room = target - current_.tokens.size();
    const std::size_t take = std::min(room, stream_len - pos);
    const std::uint32_t segment = next_segment_++;
    if (pos < doc.tokens.size()) {
      const std::size_t src_end = std::min(pos + take, doc.tokens.size());
      current_.provenance.push_back(
          {doc.doc_id, doc_index, pos, src_end, current_.tokens.size()});
      current_.tokens.insert(current_.tokens.end(), doc.tokens.begin() + static_cast<long>(pos),
                             doc.tokens.begin() + static_cast<long>(src_end));
      current_doc_tokens_ += src_end - pos;
    }
    if (eod && pos + take == stream_len) {
      current_.tokens.push_back(config_.special.eod_id);
    }
    current_.segment_ids.resize(current_.tokens.size(), segment);
    pos += take;
    if (current_.tokens.size() == target) {
      stats_.emitted_tokens += current_doc_tokens_;
      if (eod) {
        stats_.eod_tokens += static_cast<std::size_t>(
            std::count(current_.tokens.begin(), current_.tokens.end(), config_.special.eod_id));
      }
      emit();
    }
  }
}

PackStats Packer::finish() {
  if (!finished_) {
    finished_ = true;
    stats_.dropped_tokens = current_doc_tokens_;
    current_ = PackedSequence{};
    current_doc_tokens_ = 0;
  }
  return stats_;
}

std::vector<PackedSequence> pack(std::span<const Document> corpus, const PackConfig& config,
                                 PackStats* stats) {
  if (corpus.empty()) {
    throw ConfigError("packing: empty corpus");
  }
  std::vector<PackedSequence> out;
  Packer packer(config, [&out](PackedSequence&& seq) { out.push_back(std::move(seq)); });
  for (const auto& doc : corpus) {
    packer.push(doc);
  }
  const PackStats final_stats = packer.finish();
  if (stats) *stats = final_stats;
  return out;
}

void validate_sequence(const PackedSequence& seq, std::size_t target_len, TokenId eod_id) {
  if (seq.tokens.size() != target_len || seq.segment_ids.size() != target_len) {
    throw ConfigError("packing: sequence length differs from target_len");
  }
  for (std::size_t i = 1; i < seq.segment_ids.size(); ++i) {
    if (seq.segment_ids[i] < seq.segment_ids[i - 1]) {
      throw ConfigError("packing: segment ids must be non-decreasing");
    }
  }
  std::vector<bool> covered(target_len, false);
  std::size_t prev_end = 0;
  for (const auto& span : seq.provenance) {
    if (span.source_end <= span.source_start || span.dest_start < prev_end ||
        span.dest_start + span.length() > target_len) {
      throw ConfigError("packing: corrupted provenance span for '" + span.doc_id + "'");
    }
    const auto seg = seq.segment_ids[span.dest_start];
    for (std::size_t k = 0; k < span.length(); ++k) {
      if (seq.segment_ids[span.dest_start + k] != seg) {
        throw ConfigError("packing: provenance span crosses a segment boundary");
      }
      covered[span.dest_start + k] = true;
    }
    prev_end = span.dest_start + span.length();
  }
  const bool eod = seq.strategy == PackStrategy::EodCat;
  for (std::size_t i = 0; i < target_len; ++i) {
    const bool is_eod = eod && seq.tokens[i] == eod_id;
    if (covered[i] == is_eod) {
      throw ConfigError(is_eod ? "packing: EOD inside a document span"
                               : "packing: position not covered by provenance");
    }
    if (is_eod) {
      const bool segment_end =
          i + 1 == target_len || seq.segment_ids[i + 1] != seq.segment_ids[i];
      if (!segment_end) {
        throw ConfigError("packing: EOD does not terminate its segment");
      }
    }
  }
}

std::vector<Fragment> unpack(const PackedSequence& seq) {
  if (seq.segment_ids.size() != seq.tokens.size()) {
    throw ConfigError("packing: corrupted sequence (segment id count)");
  }
  std::vector<Fragment> out;
  out.reserve(seq.provenance.size());
  std::size_t prev_end = 0;
  for (const auto& span : seq.provenance) {
    if (span.source_end <= span.source_start || span.dest_start < prev_end ||
        span.dest_start + span.length() > seq.tokens.size()) {
      throw ConfigError("packing: corrupted provenance span for '" + span.doc_id + "'");
    }
    Fragment f;
    f.doc_id = span.doc_id;
    f.doc_index = span.doc_index;
    f.source_start = span.source_start;
    f.tokens.assign(seq.tokens.begin() + static_cast<long>(span.dest_start),
                    seq.tokens.begin() + static_cast<long>(span.dest_start + span.length()));
    out.push_back(std::move(f));
    prev_end = span.dest_start + span.length();
  }
  return out;
}

std::map<std::size_t, std::vector<TokenId>> reassemble(std::span<const Fragment> fragments) {
  std::map<std::size_t, std::vector<TokenId>> docs;
  for (const auto& f : fragments) {
    auto& tokens = docs[f.doc_index];
    if (f.source_start != tokens.size()) {
      throw ConfigError("packing: fragments of '" + f.doc_id + "' are not contiguous");
    }
    tokens.insert(tokens.end(), f.tokens.begin(), f.tokens.end());
  }
  return docs;
}

MaskSpec mask_for(const PackedSequence& seq) {
  if (seq.strategy == PackStrategy::AdaptiveMask) {
    return MaskSpec::segments(seq.segment_ids);
  }
  return MaskSpec::full();
}

AttentionMask::AttentionMask(MaskSpec spec, std::size_t length)
    : spec_(std::move(spec)), length_(length) {
  if (length == 0) {
    throw ConfigError("mask: length must be positive");
  }
  if (spec_.kind == MaskKind::SegmentBlockDiagonal) {
    if (spec_.segment_ids.size() != length) {
      throw ConfigError("mask: segment_ids length does not match sequence length");
    }
    std::set<std::uint32_t> seen;
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= length; ++i) {
      if (i == length || spec_.segment_ids[i] != spec_.segment_ids[begin]) {
        if (!seen.insert(spec_.segment_ids[begin]).second) {
          throw ConfigError("mask: segment ids must form contiguous runs");
        }
        blocks_.push_back({begin, i});
        begin = i;
      }
    }
  } else {
    if (!spec_.segment_ids.empty()) {
      throw ConfigError("mask: segment_ids only apply to SegmentBlockDiagonal");
    }
    blocks_.push_back({0, length});
  }
}

bool AttentionMask::allowed(std::size_t query, std::size_t key) const {
  switch (spec_.kind) {
    case MaskKind::Causal:
      return key <= query;
    case MaskKind::FullBidirectional:
      return true;
    case MaskKind::SegmentBlockDiagonal:
      return spec_.segment_ids[query] == spec_.segment_ids[key];
  }
  return false;
}

std::vector<std::uint8_t> AttentionMask::dense() const {
  if (length_ > kMaxDenseMaskLength) {
    throw ConfigError("mask: dense materialization is limited to length <= 4096");
  }
  std::vector<std::uint8_t> out(length_ * length_);
  for (std::size_t i = 0; i < length_; ++i) {
    for (std::size_t j = 0; j < length_; ++j) {
      out[i * length_ + j] = allowed(i, j) ? 1 : 0;
    }
  }
  return out;
}

AttentionMask build_mask(const MaskSpec& spec, std::size_t length) {
  return AttentionMask(spec, length);
}

double mask_density(const MaskSpec& spec, std::size_t length) {
  const AttentionMask mask(spec, length);
  const auto total = static_cast<double>(length) * static_cast<double>(length);
  switch (spec.kind) {
    case MaskKind::Causal:
      return static_cast<double>(length) * static_cast<double>(length + 1) / 2.0 / total;
    case MaskKind::FullBidirectional:
      return 1.0;
    case MaskKind::SegmentBlockDiagonal: {
      double allowed = 0.0;
      for (const auto& b : mask.blocks()) {
        const auto n = static_cast<double>(b.end - b.begin);
        allowed += n * n;
      }
      return allowed / total;
    }
  }
  return 0.0;
}

}  // namespace longdiff
