#include "longdiff/corpus_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "longdiff/error.hpp"
#include "longdiff/vocab.hpp"

namespace longdiff::io {

namespace fs = std::filesystem;
using nlohmann::json;

void append_u32_le(std::string& out, std::uint32_t value) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
  }
}

std::uint32_t read_u32_le(const unsigned char* bytes) {
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open '" + path.string() + "' for reading");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) {
    throw IoError("read failure on '" + path.string() + "'");
  }
  return std::move(ss).str();
}

void write_file(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) {
      throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    }
  }
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot open '" + tmp.string() + "' for writing");
    }
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
      throw IoError("write failure on '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
  }
}

namespace {

json parse_json(const std::string& text, const fs::path& origin) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in '" + origin.string() + "': " + e.what());
  }
}

std::vector<TokenId> decode_u32_payload(const std::string& bytes, const fs::path& origin) {
  if (bytes.size() % 4 != 0) {
    throw IoError("'" + origin.string() + "' is not a whole number of uint32 tokens");
  }
  std::vector<TokenId> out(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = read_u32_le(p + 4 * i);
  }
  return out;
}

}  // namespace

std::vector<Document> read_text_documents(const std::vector<fs::path>& files) {
  std::vector<Document> docs;
  docs.reserve(files.size());
  for (const auto& f : files) {
    const std::string text = read_file(f);
    if (text.empty()) continue;
    docs.push_back({f.filename().string(), encode_bytes(text)});
  }
  return docs;
}

std::vector<Document> read_jsonl_documents(const fs::path& file) {
  std::istringstream in(read_file(file));
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!row.contains("text") || !row["text"].is_string()) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": missing string field 'text'");
    }
    std::string id = std::to_string(lineno - 1);
    if (row.contains("id")) {
      id = row["id"].is_string() ? row["id"].get<std::string>() : row["id"].dump();
    }
    const auto& text = row["text"].get_ref<const std::string&>();
    if (text.empty()) continue;
    docs.push_back({std::move(id), encode_bytes(text)});
  }
  return docs;
}

std::vector<Document> read_token_documents(const fs::path& bin, const fs::path& sidecar) {
  const auto tokens = decode_u32_payload(read_file(bin), bin);
  const json meta = parse_json(read_file(sidecar), sidecar);
  if (!meta.contains("documents") || !meta["documents"].is_array()) {
    throw IoError("'" + sidecar.string() + "' has no 'documents' array");
  }
  std::vector<Document> docs;
  try {
    for (const auto& d : meta["documents"]) {
      const auto offset = d.at("offset").get<std::size_t>();
      const auto length = d.at("length").get<std::size_t>();
      if (offset + length > tokens.size()) {
        throw IoError("document offsets exceed '" + bin.string() + "'");
      }
      std::string id = d.contains("id") ? (d["id"].is_string() ? d["id"].get<std::string>()
                                                                : d["id"].dump())
                                        : std::to_string(docs.size());
      docs.push_back({std::move(id),
                      std::vector<TokenId>(tokens.begin() + static_cast<long>(offset),
                                           tokens.begin() + static_cast<long>(offset + length))});
    }
  } catch (const json::exception& e) {
    throw IoError("malformed document entry in '" + sidecar.string() + "': " + e.what());
  }
  return docs;
}

void write_token_documents(const std::vector<Document>& docs, int vocab_size, const fs::path& bin,
                           const fs::path& sidecar) {
  std::string payload;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& d : docs) {
    for (const TokenId t : d.tokens) append_u32_le(payload, t);
    entries.push_back({{"id", d.doc_id}, {"offset", offset}, {"length", d.tokens.size()}});
    offset += d.tokens.size();
  }
  json meta = {{"format", "longdiff-tokens/1"}, {"vocab_size", vocab_size}, {"documents", entries}};
  write_file(bin, payload);
  write_file(sidecar, meta.dump(1) + "\n");
}

std::vector<Document> read_corpus(const fs::path& path) {
  std::error_code ec;
  if (fs::is_directory(path, ec)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return read_text_documents(files);
  }
  if (!fs::exists(path, ec)) {
    throw IoError("corpus path '" + path.string() + "' does not exist");
  }
  const auto ext = path.extension().string();
  if (ext == ".jsonl") {
    return read_jsonl_documents(path);
  }
  if (ext == ".bin") {
    fs::path sidecar = path;
    sidecar += ".json";
    return read_token_documents(path, sidecar);
  }
  return read_text_documents({path});
}

void write_packed(const PackedFile& packed, const fs::path& bin, const fs::path& sidecar) {
  std::string payload;
  payload.reserve(packed.sequences.size() * packed.target_len * 4);
  json seqs = json::array();
  for (const auto& seq : packed.sequences) {
    validate_sequence(seq, packed.target_len, packed.eod_id);
    for (const TokenId t : seq.tokens) append_u32_le(payload, t);
    json runs = json::array();
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= seq.segment_ids.size(); ++i) {
      if (i == seq.segment_ids.size() || seq.segment_ids[i] != seq.segment_ids[begin]) {
        runs.push_back(i - begin);
        begin = i;
      }
    }
    json prov = json::array();
    for (const auto& p : seq.provenance) {
      prov.push_back({{"doc_id", p.doc_id},
                      {"doc_index", p.doc_index},
                      {"source_start", p.source_start},
                      {"source_end", p.source_end},
                      {"dest_start", p.dest_start}});
    }
    seqs.push_back({{"segment_runs", runs}, {"provenance", prov}});
  }
  json meta = {{"format", "longdiff-packed/1"},
               {"target_len", packed.target_len},
               {"strategy", std::string(to_string(packed.strategy))},
               {"eod_id", packed.eod_id},
               {"num_sequences", packed.sequences.size()},
               {"sequences", seqs}};
  write_file(bin, payload);
  write_file(sidecar, meta.dump() + "\n");
}

PackedFile read_packed(const fs::path& bin, const fs::path& sidecar) {
  const json meta = parse_json(read_file(sidecar), sidecar);
  PackedFile out;
  try {
    if (meta.at("format").get<std::string>() != "longdiff-packed/1") {
      throw IoError("'" + sidecar.string() + "' has an unsupported format tag");
    }
    out.target_len = meta.at("target_len").get<std::size_t>();
    out.strategy = parse_strategy(meta.at("strategy").get<std::string>());
    out.eod_id = meta.at("eod_id").get<TokenId>();
    const auto tokens = decode_u32_payload(read_file(bin), bin);
    const auto& seqs = meta.at("sequences");
    if (out.target_len == 0 || tokens.size() != seqs.size() * out.target_len) {
      throw IoError("'" + bin.string() + "' size does not match its sidecar");
    }
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      PackedSequence seq;
      seq.strategy = out.strategy;
      seq.tokens.assign(tokens.begin() + static_cast<long>(s * out.target_len),
                        tokens.begin() + static_cast<long>((s + 1) * out.target_len));
      std::uint32_t segment = 0;
      for (const auto& run : seqs[s].at("segment_runs")) {
        seq.segment_ids.insert(seq.segment_ids.end(), run.get<std::size_t>(), segment++);
      }
      for (const auto& p : seqs[s].at("provenance")) {
        seq.provenance.push_back({p.at("doc_id").get<std::string>(),
                                  p.at("doc_index").get<std::size_t>(),
                                  p.at("source_start").get<std::size_t>(),
                                  p.at("source_end").get<std::size_t>(),
                                  p.at("dest_start").get<std::size_t>()});
      }
      try {
        validate_sequence(seq, out.target_len, out.eod_id);
      } catch (const ConfigError& e) {
        throw IoError("'" + sidecar.string() + "' sequence " + std::to_string(s) + ": " + e.what());
      }
      out.sequences.push_back(std::move(seq));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed packed sidecar '" + sidecar.string() + "': " + e.what());
  }
  return out;
}

}  // namespace longdiff::io
