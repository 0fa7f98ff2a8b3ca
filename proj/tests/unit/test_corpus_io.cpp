#include <doctest.h>

#include <filesystem>

#include "longdiff/corpus_io.hpp"
#include "longdiff/error.hpp"
#include "longdiff/vocab.hpp"

using namespace longdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("longdiff_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("byte vocabulary") {
  const auto t = encode_bytes("h\xc3\xa9!");
  CHECK(t == std::vector<TokenId>{'h', 0xc3, 0xa9, '!'});
  CHECK(decode_bytes(t) == "h\xc3\xa9!");
  CHECK(vocab::kByteVocabSize == 259);
  CHECK(vocab::kMaskId != vocab::kEodId);
}

TEST_CASE("text directory, jsonl and single-file corpora") {
  TempDir dir("text");
  io::write_file(dir.path / "b.txt", "second");
  io::write_file(dir.path / "a.txt", "first");
  const auto docs = io::read_corpus(dir.path);
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].doc_id == "a.txt");
  CHECK(decode_bytes(docs[1].tokens) == "second");

  const auto jsonl = dir.path / "c.jsonl";
  io::write_file(jsonl, "{\"id\": \"x\", \"text\": \"alpha\"}\n\n{\"id\": \"y\", \"text\": \"beta\"}\n");
  const auto j = io::read_corpus(jsonl);
  REQUIRE(j.size() == 2);
  CHECK(j[1].doc_id == "y");
  CHECK(decode_bytes(j[0].tokens) == "alpha");

  io::write_file(jsonl, "{\"id\": \"x\"}\n");
  CHECK_THROWS_AS(io::read_corpus(jsonl), IoError);
  io::write_file(jsonl, "not json\n");
  CHECK_THROWS_AS(io::read_corpus(jsonl), IoError);
  CHECK_THROWS_AS(io::read_corpus(dir.path / "missing.txt"), IoError);
}

TEST_CASE("pre-tokenized corpus round-trip") {
  TempDir dir("tok");
  const std::vector<Document> docs{{"d0", {1, 2, 3}}, {"d1", {70000, 5}}};
  const auto bin = dir.path / "c.bin";
  fs::path sidecar = bin;
  sidecar += ".json";
  io::write_token_documents(docs, 70001, bin, sidecar);
  const auto back = io::read_corpus(bin);
  REQUIRE(back.size() == 2);
  CHECK(back[0].tokens == docs[0].tokens);
  CHECK(back[1].tokens == docs[1].tokens);
  CHECK(back[1].doc_id == "d1");
  CHECK(fs::file_size(bin) == 20);

  io::write_file(bin, io::read_file(bin).substr(0, 10));
  CHECK_THROWS_AS(io::read_corpus(bin), IoError);
}

TEST_CASE("packed file round-trip") {
  TempDir dir("packed");
  std::vector<Document> docs;
  for (int i = 0; i < 9; ++i) docs.push_back({"d" + std::to_string(i), encode_bytes(std::string(7 + i, 'a' + i))});
  const PackConfig config{16, PackStrategy::EodCat, {vocab::kEodId, vocab::kMaskId}};
  io::PackedFile packed{16, PackStrategy::EodCat, vocab::kEodId, pack(docs, config)};
  const auto bin = dir.path / "p.bin";
  const auto side = dir.path / "p.json";
  io::write_packed(packed, bin, side);
  const auto back = io::read_packed(bin, side);
  CHECK(back.target_len == 16);
  CHECK(back.strategy == PackStrategy::EodCat);
  REQUIRE(back.sequences.size() == packed.sequences.size());
  for (std::size_t i = 0; i < back.sequences.size(); ++i) CHECK(back.sequences[i] == packed.sequences[i]);
  CHECK(fs::file_size(bin) == packed.sequences.size() * 16 * 4);

  const std::string first_bin = io::read_file(bin);
  const std::string first_side = io::read_file(side);
  io::write_packed(packed, bin, side);
  CHECK(io::read_file(bin) == first_bin);
  CHECK(io::read_file(side) == first_side);

  io::write_file(bin, first_bin.substr(4));
  CHECK_THROWS_AS(io::read_packed(bin, side), IoError);
}

TEST_CASE("little-endian helpers") {
  std::string buf;
  io::append_u32_le(buf, 0x01020304u);
  CHECK(buf == std::string("\x04\x03\x02\x01", 4));
  CHECK(io::read_u32_le(reinterpret_cast<const unsigned char*>(buf.data())) == 0x01020304u);
}
