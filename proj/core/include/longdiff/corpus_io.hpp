#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "longdiff/packing.hpp"

namespace longdiff::io {

/// One document per UTF-8 file; doc_id is the file name. Byte-tokenized.
std::vector<Document> read_text_documents(const std::vector<std::filesystem::path>& files);

/// JSON-lines with {"id", "text"} per line. Byte-tokenized.
std::vector<Document> read_jsonl_documents(const std::filesystem::path& file);

/// Pre-tokenized corpus: little-endian uint32 ids plus a JSON sidecar
/// {"format": "longdiff-tokens/1", "vocab_size": K,
///  "documents": [{"id": ..., "offset": ..., "length": ...}, ...]} (offsets in tokens).
std::vector<Document> read_token_documents(const std::filesystem::path& bin,
                                           const std::filesystem::path& sidecar);
void write_token_documents(const std::vector<Document>& docs, int vocab_size,
                           const std::filesystem::path& bin, const std::filesystem::path& sidecar);

/// Dispatches on the path: directory -> text files (sorted), *.jsonl -> JSON lines,
/// *.bin -> tokens with "<path>.json" sidecar, anything else -> single text file.
std::vector<Document> read_corpus(const std::filesystem::path& path);

struct PackedFile {
  std::size_t target_len = 0;
  PackStrategy strategy = PackStrategy::DirectCat;
  TokenId eod_id = 0;
  std::vector<PackedSequence> sequences;
};

/// Binary: sequence-major little-endian uint32 ids. Sidecar JSON: target_len, strategy,
/// eod_id, per-sequence segment run-lengths and provenance.
void write_packed(const PackedFile& packed, const std::filesystem::path& bin,
                  const std::filesystem::path& sidecar);
PackedFile read_packed(const std::filesystem::path& bin, const std::filesystem::path& sidecar);

/// Little-endian uint32 helpers shared by the binary formats.
void append_u32_le(std::string& out, std::uint32_t value);
std::uint32_t read_u32_le(const unsigned char* bytes);

std::string read_file(const std::filesystem::path& path);
/// Writes atomically through a temporary file next to the destination.
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace longdiff::io
