#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "longdiff/checkpoint.hpp"
#include "longdiff/cli.hpp"
#include "longdiff/corpus_io.hpp"
#include "longdiff/digest.hpp"

using namespace longdiff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workdir {
  fs::path dir;
  explicit Workdir(const std::string& name) : dir(fs::temp_directory_path() / ("longdiff_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }
  [[nodiscard]] std::string operator/(const std::string& f) const { return (dir / f).string(); }
};

json read_json(const std::string& path) { return json::parse(io::read_file(path)); }

const std::vector<std::string> kSmallModel{"--d-model", "32", "--heads", "2", "--peak-lr", "1e-3",
                                            "--min-lr", "1e-4", "--warmup-fraction", "0.1"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("rope-report on the reference configuration") {
  const auto r = run({"rope-report", "--base", "500000", "--head-dim", "128", "--train-ctx", "4096",
                      "--target-ctx", "4096", "--mode", "diffusion"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("critical_dim") == 70);
  const auto v = run({"rope-report", "--base", "500000", "--head-dim", "128", "--train-ctx", "4096",
                      "--target-ctx", "4096", "--mode", "vanilla"});
  REQUIRE(v.code == 0);
  CHECK(json::parse(v.out).at("lambda") == 1.0);
}

TEST_CASE("missing or invalid flags exit with code 2 and usage text") {
  auto r = run({"rope-report", "--head-dim", "128", "--train-ctx", "4096", "--target-ctx", "4096",
                "--mode", "diffusion"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--base") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);
  r = run({"rope-report", "--base", "banana"});
  CHECK(r.code == 2);
  r = run({"rope-report", "--base", "1", "--head-dim", "128", "--train-ctx", "4096", "--target-ctx",
           "4096", "--mode", "diffusion"});
  CHECK(r.code == 2);
  r = run({"rope-report", "--base", "10000", "--head-dim", "64", "--train-ctx", "512", "--target-ctx",
           "1024", "--mode", "sideways"});
  CHECK(r.code == 2);
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
}

TEST_CASE("help lists every flag") {
  const auto r = run({"eval-niah", "--help"});
  CHECK(r.code == 0);
  for (const char* flag : {"--checkpoint", "--lengths", "--depths", "--trials", "--gen-len",
                           "--block-size", "--steps", "--remask", "--seed", "--threads",
                           "--max-positions", "--out", "--config"}) {
    CHECK(r.out.find(flag) != std::string::npos);
  }
}

TEST_CASE("config file fills unset flags and flags win") {
  Workdir w("config");
  io::write_file(w / "cfg.json", R"({"base": 500000, "head-dim": 64, "train-ctx": 4096,
                                     "target-ctx": 8192, "mode": "baseline"})");
  const auto r = run({"rope-report", "--config", w / "cfg.json", "--head-dim", "128", "--out",
                      w / "rope"});
  REQUIRE(r.code == 0);
  const auto report = read_json(w / "rope.json");
  CHECK(report.at("head_dim") == 128);
  CHECK(report.at("mode") == "BaselineNTK");
  const auto manifest = read_json(w / "rope.manifest.json");
  CHECK(manifest.at("config").at("head-dim") == 128);
  CHECK(manifest.at("config").at("base") == 500000.0);
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("outputs").size() == 2);
  CHECK(manifest.at("outputs")[0].at("sha256") == sha256_file(w / "rope.csv"));

  io::write_file(w / "bad.json", R"({"bogus": 1})");
  CHECK(run({"rope-report", "--config", w / "bad.json"}).code == 2);
  io::write_file(w / "broken.json", "{not json");
  CHECK(run({"rope-report", "--config", w / "broken.json"}).code == 2);
  CHECK(run({"rope-report", "--config", w / "absent.json"}).code == 3);
}

TEST_CASE("pack reports conservation and fails cleanly") {
  Workdir w("pack");
  io::write_file(w / "c.jsonl", "{\"id\":\"a\",\"text\":\"0123456789\"}\n{\"id\":\"b\",\"text\":\"abcdefghijklmnopqrst\"}\n{\"id\":\"c\",\"text\":\"vwxyz\"}\n");
  auto r = run({"pack", "--input", w / "c.jsonl", "--target-len", "32", "--strategy", "eod", "--out", w / "p"});
  REQUIRE(r.code == 0);
  const auto stats = json::parse(r.out);
  CHECK(stats.at("sequences") == 1);
  CHECK(stats.at("conserved") == true);
  CHECK(stats.at("eod_tokens") == 2);
  const auto packed = io::read_packed(w / "p.bin", w / "p.json");
  CHECK(packed.sequences[0].tokens[10] == 257);
  CHECK(packed.sequences[0].tokens[31] == 257);

  r = run({"pack", "--input", w / "missing.jsonl", "--target-len", "32", "--strategy", "eod", "--out", w / "q"});
  CHECK(r.code == 3);
  const auto m = read_json(w / "q.manifest.json");
  CHECK(m.at("status") == "failed");
  CHECK(m.at("error").at("exit_code") == 3);
  CHECK_FALSE(fs::exists(w / "q.bin"));
  CHECK(run({"pack", "--input", w / "c.jsonl", "--target-len", "32", "--strategy", "zip", "--out", w / "q"}).code == 2);
}

TEST_CASE("end-to-end smoke: pack, train 50 steps, eval-ppl on 3 lengths") {
  Workdir w("smoke");
  const auto t0 = std::chrono::steady_clock::now();
  REQUIRE(run({"synth-niah", "--docs", "120", "--min-len", "180", "--max-len", "256", "--out", w / "c.jsonl"}).code == 0);
  REQUIRE(run({"pack", "--input", w / "c.jsonl", "--target-len", "128", "--strategy", "adaptive", "--out", w / "p"}).code == 0);
  const auto train = run(concat({"train", "--data", w / "p", "--out", w / "m.ckpt", "--total-iters", "50",
                                 "--decay-iters", "50", "--batch-tokens", "1024"}, kSmallModel));
  REQUIRE(train.code == 0);
  std::size_t lines = 0;
  for (const char c : io::read_file(w / "m.ckpt.log.jsonl")) lines += c == '\n';
  CHECK(lines == 50);
  const auto ppl = run({"eval-ppl", "--checkpoint", w / "m.ckpt", "--text", w / "c.jsonl", "--lengths",
                        "32,64,128", "--n-mc", "4", "--out", w / "ppl"});
  REQUIRE(ppl.code == 0);
  const auto report = read_json(w / "ppl.json");
  CHECK(report.at("ppl").size() == 3);
  for (const auto& p : report.at("ppl")) CHECK(p.get<double>() >= 1.0);
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  MESSAGE("smoke pipeline took ", minutes, " minutes");
  CHECK(minutes < 10.0);
}

TEST_CASE("train, resume, extend and evaluate deterministically") {
  Workdir w("pipeline");
  REQUIRE(run({"synth-niah", "--docs", "60", "--out", w / "c.jsonl"}).code == 0);
  REQUIRE(run({"pack", "--input", w / "c.jsonl", "--target-len", "256", "--strategy", "adaptive", "--out", w / "p"}).code == 0);
  const auto base = concat({"train", "--data", w / "p", "--decay-iters", "10", "--batch-tokens", "512"}, kSmallModel);
  REQUIRE(run(concat(base, {"--out", w / "full.ckpt", "--total-iters", "10"})).code == 0);
  REQUIRE(run(concat(base, {"--out", w / "half.ckpt", "--total-iters", "5"})).code == 0);
  REQUIRE(run(concat(base, {"--out", w / "resumed.ckpt", "--total-iters", "10", "--resume", w / "half.ckpt"})).code == 0);
  CHECK(load_checkpoint(w / "resumed.ckpt").params.head == load_checkpoint(w / "full.ckpt").params.head);

  // Same manifest inputs, more threads: identical checkpoint bytes.
  REQUIRE(run({"train", "--config", w / "full.ckpt.manifest.json", "--out", w / "again.ckpt", "--threads", "3"}).code == 0);
  CHECK(sha256_file(w / "again.ckpt") == sha256_file(w / "full.ckpt"));

  CHECK(run({"extend", "--checkpoint", w / "full.ckpt", "--target-ctx", "128", "--mode", "diffusion", "--out", w / "x.ckpt"}).code == 2);
  CHECK(read_json(w / "x.ckpt.manifest.json").at("status") == "failed");
  REQUIRE(run({"extend", "--checkpoint", w / "full.ckpt", "--target-ctx", "512", "--mode", "diffusion", "--out", w / "x.ckpt"}).code == 0);
  const auto ext = load_checkpoint(w / "x.ckpt");
  CHECK(ext.config.max_positions == 512);
  CHECK(ext.config.rope.mode == rope::ScalingMode::DiffusionNTK);
  CHECK(fs::exists(w / "x.ckpt.rope-after.csv"));

  const std::vector<std::string> niah{"eval-niah", "--checkpoint", w / "x.ckpt", "--lengths", "256,512",
                                      "--depths", "0,0.5,1", "--trials", "2", "--gen-len", "16",
                                      "--block-size", "8", "--steps", "8"};
  REQUIRE(run(concat(niah, {"--out", w / "n1", "--threads", "1"})).code == 0);
  REQUIRE(run(concat(niah, {"--out", w / "n4", "--threads", "4"})).code == 0);
  CHECK(io::read_file(w / "n1.csv") == io::read_file(w / "n4.csv"));
  CHECK(io::read_file(w / "n1.json") == io::read_file(w / "n4.json"));

  // The unextended checkpoint can be pushed past its window explicitly.
  CHECK(run({"eval-ppl", "--checkpoint", w / "full.ckpt", "--text", w / "c.jsonl", "--lengths", "512", "--out", w / "u"}).code == 2);
  CHECK(run({"eval-ppl", "--checkpoint", w / "full.ckpt", "--text", w / "c.jsonl", "--lengths", "512",
             "--max-positions", "512", "--out", w / "u"}).code == 0);
}

TEST_CASE("non-finite parameters abort training with code 4") {
  Workdir w("nan");
  REQUIRE(run({"synth-niah", "--docs", "20", "--out", w / "c.jsonl"}).code == 0);
  REQUIRE(run({"pack", "--input", w / "c.jsonl", "--target-len", "256", "--strategy", "adaptive", "--out", w / "p"}).code == 0);
  model::ModelConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.head_dim = 16;
  c.rope.head_dim = 16;
  Checkpoint bad{c, model::init_parameters<float>(c, 1), 0, 0, std::nullopt, "{}"};
  bad.params.head(0, 0) = std::numeric_limits<float>::quiet_NaN();
  save_checkpoint(bad, w / "bad.ckpt");
  const auto r = run({"train", "--data", w / "p", "--init", w / "bad.ckpt", "--out", w / "m.ckpt",
                      "--total-iters", "3", "--decay-iters", "100", "--batch-tokens", "512"});
  CHECK(r.code == 4);
  const auto m = read_json(w / "m.ckpt.manifest.json");
  CHECK(m.at("status") == "failed");
  CHECK(m.at("error").at("exit_code") == 4);
  CHECK_FALSE(fs::exists(w / "m.ckpt"));
}
