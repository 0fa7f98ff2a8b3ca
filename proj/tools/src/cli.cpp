#include "longdiff/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "longdiff/checkpoint.hpp"
#include "longdiff/corpus_io.hpp"
#include "longdiff/digest.hpp"
#include "longdiff/error.hpp"
#include "longdiff/eval.hpp"
#include "longdiff/rope.hpp"
#include "longdiff/trainer.hpp"
#include "longdiff/vocab.hpp"

namespace longdiff::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path with_suffix(const fs::path& base, const std::string& suffix) {
  fs::path p = base;
  p += suffix;
  return p;
}

/// RunManifest: written next to a command's outputs, on success and on failure.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), started_(utc_now()) {}

  void set_config(json config) { config_ = std::move(config); }
  void set_path(fs::path path) { path_ = std::move(path); }
  [[nodiscard]] bool has_path() const { return !path_.empty(); }

  void input(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) input(f);
      return;
    }
    inputs_.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  }

  void output(const fs::path& p) {
    outputs_.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  }

  void write(const std::optional<std::pair<int, std::string>>& error) const {
    json seed = nullptr;
    if (config_.contains("seed")) seed = config_.at("seed");
    json doc = {{"tool", "longdiff"},
                {"version", LONGDIFF_VERSION},
                {"command", command_},
                {"config", config_},
                {"seed", seed},
                {"inputs", inputs_},
                {"outputs", outputs_},
                {"started_at", started_},
                {"finished_at", utc_now()},
                {"status", error ? "failed" : "ok"},
                {"error", nullptr}};
    if (error) doc["error"] = {{"exit_code", error->first}, {"message", error->second}};
    io::write_file(path_, doc.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::string started_;
  json config_ = json::object();
  json inputs_ = json::array();
  json outputs_ = json::array();
  fs::path path_;
};

/// A subcommand: its options, how to echo them, and what it does.
struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::pair<std::string, std::function<json()>>> fields;
  std::vector<std::string> required;
  // Keys left out of checkpoint metadata because they cannot affect results.
  std::vector<std::string> volatile_keys{"threads"};
  std::function<fs::path()> manifest_path;
  std::function<void(Manifest&, std::ostream&)> body;

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    CLI::Option* opt = app->add_option("--" + name, var, help)->capture_default_str();
    fields.emplace_back(name, [&var] { return json(var); });
    return opt;
  }

  template <typename T>
  CLI::Option* add_required(const std::string& name, T& var, const std::string& help) {
    required.push_back(name);
    return add(name, var, help + " (required)");
  }

  [[nodiscard]] json resolved() const {
    json j = json::object();
    for (const auto& [name, get] : fields) j[name] = get();
    return j;
  }

  [[nodiscard]] json stable_config() const {
    json j = resolved();
    for (const auto& k : volatile_keys) j.erase(k);
    return j;
  }
};

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number() || v.is_null()) return v.dump();
  throw ConfigError("config: nested objects are not accepted as option values");
}

// Fills options that were not given on the command line from a JSON object. A RunManifest
// is accepted as well; its resolved config is used.
void apply_config(Command& cmd) {
  if (cmd.config_path.empty()) return;
  json j;
  try {
    j = json::parse(io::read_file(cmd.config_path));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + cmd.config_path + "': " + e.what());
  }
  if (j.is_object() && j.contains("command") && j.contains("config")) {
    if (j.at("command") != cmd.app->get_name()) {
      throw ConfigError("config '" + cmd.config_path + "' is a manifest for '" +
                        j.at("command").get<std::string>() + "'");
    }
    j = j.at("config");
  }
  if (!j.is_object()) throw ConfigError("config '" + cmd.config_path + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = key == "config" ? nullptr : cmd.app->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw ConfigError("config: unknown key '" + key + "' for " + cmd.app->get_name());
    }
    if (opt->count() > 0) continue;
    if (value.is_array()) {
      for (const auto& e : value) opt->add_result(scalar_text(e));
    } else {
      opt->add_result(scalar_text(value));
    }
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

void check_required(const Command& cmd) {
  for (const auto& name : cmd.required) {
    if (cmd.app->get_option("--" + name)->count() == 0) {
      throw ConfigError("missing required option --" + name);
    }
  }
}

rope::ScalingMode parse_mode_flag(const std::string& s) { return rope::parse_mode(s); }

model::LossWeighting parse_weighting(const std::string& s) {
  if (s == "masked_mean") return model::LossWeighting::MaskedMean;
  if (s == "inverse_t") return model::LossWeighting::InverseT;
  throw ConfigError("unknown loss weighting '" + s + "' (expected masked_mean or inverse_t)");
}

std::vector<TokenId> concatenated_tokens(const std::vector<Document>& docs) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) out.push_back(vocab::kEodId);
    out.insert(out.end(), docs[i].tokens.begin(), docs[i].tokens.end());
  }
  return out;
}

void write_text_output(Manifest& m, const fs::path& path, const std::string& text) {
  io::write_file(path, text);
  m.output(path);
}

// ---------------------------------------------------------------------------

struct RopeReportArgs {
  double base = 0.0;
  int head_dim = 0;
  long train_ctx = 0;
  long target_ctx = 0;
  std::string mode;
  std::string out;
};

std::unique_ptr<Command> make_rope_report(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<RopeReportArgs>();
  cmd->app = root.add_subcommand("rope-report", "RoPE scaling factor, critical dimension and per-pair periods");
  cmd->add_required("base", a->base, "RoPE base b");
  cmd->add_required("head-dim", a->head_dim, "rotary head dimension d");
  cmd->add_required("train-ctx", a->train_ctx, "trained context length");
  cmd->add_required("target-ctx", a->target_ctx, "target context length");
  cmd->add_required("mode", a->mode, "vanilla, baseline or diffusion");
  cmd->add("out", a->out, "write <out>.csv, <out>.json and a manifest instead of only printing");
  cmd->manifest_path = [a] { return a->out.empty() ? fs::path{} : with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    const rope::RopeConfig cfg{a->base, a->head_dim, a->train_ctx, a->target_ctx,
                               parse_mode_flag(a->mode)};
    const auto report = rope::rope_report(cfg);
    out << report.json;
    if (!a->out.empty()) {
      write_text_output(m, with_suffix(a->out, ".csv"), report.csv);
      write_text_output(m, with_suffix(a->out, ".json"), report.json);
    }
  };
  return cmd;
}

struct SynthArgs {
  std::size_t docs = 2000;
  std::size_t min_len = 180;
  std::size_t max_len = 256;
  std::size_t gen_len = 32;
  std::uint64_t seed = 0;
  std::string out;
};

std::unique_ptr<Command> make_synth(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<SynthArgs>();
  cmd->app = root.add_subcommand("synth-niah", "Write a synthetic corpus of NIAH-style documents (JSON lines)");
  cmd->add("docs", a->docs, "number of documents");
  cmd->add("min-len", a->min_len, "shortest document, tokens");
  cmd->add("max-len", a->max_len, "longest document, tokens");
  cmd->add("gen-len", a->gen_len, "tokens after each question reserved for the answer and tail");
  cmd->add("seed", a->seed, "generator seed");
  cmd->add_required("out", a->out, "output .jsonl path");
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    const auto docs = eval::make_niah_corpus(a->docs, a->min_len, a->max_len, a->gen_len, a->seed);
    std::string text;
    for (const auto& d : docs) {
      text += json({{"id", d.doc_id}, {"text", decode_bytes(d.tokens)}}).dump() + "\n";
    }
    write_text_output(m, a->out, text);
    out << "wrote " << docs.size() << " documents to " << a->out << "\n";
  };
  return cmd;
}

struct PackArgs {
  std::string input;
  std::size_t target_len = 0;
  std::string strategy;
  std::uint32_t eod_id = vocab::kEodId;
  std::uint32_t mask_id = vocab::kMaskId;
  std::string out;
};

std::unique_ptr<Command> make_pack(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<PackArgs>();
  cmd->app = root.add_subcommand("pack", "Pack a corpus into fixed-length training sequences");
  cmd->add_required("input", a->input, "corpus: directory of text files, .jsonl, .bin (+ .bin.json) or a text file");
  cmd->add_required("target-len", a->target_len, "tokens per packed sequence");
  cmd->add_required("strategy", a->strategy, "direct, eod or adaptive");
  cmd->add("eod-id", a->eod_id, "end-of-document token id");
  cmd->add("mask-id", a->mask_id, "reserved mask id; documents containing it are rejected");
  cmd->add_required("out", a->out, "output prefix; writes <out>.bin and <out>.json");
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    const PackStrategy strategy = parse_strategy(a->strategy);
    m.input(a->input);
    if (fs::path(a->input).extension() == ".bin") m.input(with_suffix(a->input, ".json"));
    const auto docs = io::read_corpus(a->input);
    PackStats stats;
    const PackConfig config{a->target_len, strategy, {a->eod_id, a->mask_id}};
    io::PackedFile packed{a->target_len, strategy, a->eod_id, pack(docs, config, &stats)};
    const auto bin = with_suffix(a->out, ".bin");
    const auto side = with_suffix(a->out, ".json");
    io::write_packed(packed, bin, side);
    m.output(bin);
    m.output(side);
    out << json({{"documents", stats.documents},
                 {"sequences", stats.sequences},
                 {"input_tokens", stats.input_tokens},
                 {"emitted_tokens", stats.emitted_tokens},
                 {"dropped_tokens", stats.dropped_tokens},
                 {"eod_tokens", stats.eod_tokens},
                 {"conserved", stats.emitted_tokens + stats.dropped_tokens == stats.input_tokens}})
               .dump()
        << "\n";
  };
  return cmd;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string init;
  std::string resume;
  int d_model = 128;
  int layers = 2;
  int heads = 4;
  int mlp_mult = 4;
  double rope_base = 10000.0;
  double init_std = 0.02;
  double peak_lr = 2e-5;
  double min_lr = 2e-6;
  double warmup_fraction = 0.03;
  std::int64_t decay_iters = 400;
  std::int64_t total_iters = 600;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  std::int64_t batch_tokens = 65536;
  std::uint64_t seed = 0;
  std::string weighting = "masked_mean";
  int threads = 1;
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 10;
};

std::unique_ptr<Command> make_train(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<TrainArgs>();
  cmd->app = root.add_subcommand("train", "Train or post-train the diffusion model on packed sequences");
  cmd->add_required("data", a->data, "packed prefix written by `pack`");
  cmd->add_required("out", a->out, "output checkpoint path");
  cmd->add("init", a->init, "start from this checkpoint's parameters and config (fresh optimizer)");
  cmd->add("resume", a->resume, "continue this checkpoint's run, optimizer state included");
  cmd->add("d-model", a->d_model, "model width (new models only)");
  cmd->add("layers", a->layers, "transformer layers (new models only)");
  cmd->add("heads", a->heads, "attention heads (new models only)");
  cmd->add("mlp-mult", a->mlp_mult, "MLP expansion factor (new models only)");
  cmd->add("rope-base", a->rope_base, "RoPE base (new models only)");
  cmd->add("init-std", a->init_std, "initial weight standard deviation (new models only)");
  cmd->add("peak-lr", a->peak_lr, "peak learning rate");
  cmd->add("min-lr", a->min_lr, "final learning rate");
  cmd->add("warmup-fraction", a->warmup_fraction, "warmup steps as a fraction of decay-iters");
  cmd->add("decay-iters", a->decay_iters, "step at which the cosine reaches min-lr");
  cmd->add("total-iters", a->total_iters, "optimizer steps to run");
  cmd->add("weight-decay", a->weight_decay, "AdamW decoupled weight decay");
  cmd->add("beta1", a->beta1, "AdamW beta1");
  cmd->add("beta2", a->beta2, "AdamW beta2");
  cmd->add("grad-clip", a->grad_clip, "global gradient-norm clip");
  cmd->add("batch-tokens", a->batch_tokens, "tokens per batch (whole sequences)");
  cmd->add("seed", a->seed, "initialization and sampling seed");
  cmd->add("weighting", a->weighting, "masked_mean or inverse_t");
  cmd->add("threads", a->threads, "worker threads (results do not depend on it)");
  cmd->add("checkpoint-every", a->checkpoint_every, "also write the checkpoint every N steps (0 = only at the end)");
  cmd->add("log-every", a->log_every, "print a progress line every N steps");
  cmd->volatile_keys = {"threads", "log-every", "out", "checkpoint-every"};
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  Command* self = cmd.get();
  cmd->body = [a, self](Manifest& m, std::ostream& out) {
    if (!a->init.empty() && !a->resume.empty()) {
      throw ConfigError("train: --init and --resume are mutually exclusive");
    }
    train::TrainConfig tc;
    tc.peak_lr = a->peak_lr;
    tc.min_lr = a->min_lr;
    tc.warmup_fraction = a->warmup_fraction;
    tc.decay_iters = a->decay_iters;
    tc.total_iters = a->total_iters;
    tc.weight_decay = a->weight_decay;
    tc.beta1 = a->beta1;
    tc.beta2 = a->beta2;
    tc.grad_clip = a->grad_clip;
    tc.batch_tokens = a->batch_tokens;
    tc.seed = a->seed;
    tc.weighting = parse_weighting(a->weighting);
    tc.threads = a->threads;
    tc.validate();

    const auto bin = with_suffix(a->data, ".bin");
    const auto side = with_suffix(a->data, ".json");
    m.input(bin);
    m.input(side);
    const auto packed = io::read_packed(bin, side);
    if (packed.sequences.empty()) throw ConfigError("train: packed data holds no sequences");
    tc.mask_strategy = packed.strategy;

    model::ModelConfig config;
    train::TrainerState state;
    if (!a->init.empty() || !a->resume.empty()) {
      const std::string& from = a->init.empty() ? a->resume : a->init;
      m.input(from);
      auto ckpt = load_checkpoint(from);
      config = ckpt.config;
      state.params = std::move(ckpt.params);
      if (!a->resume.empty()) {
        if (!ckpt.optim) throw ConfigError("train: --resume checkpoint has no optimizer state");
        state.optim = std::move(*ckpt.optim);
      } else {
        state.optim = train::OptimState::zeros_like(state.params);
      }
    } else {
      if (a->heads <= 0 || a->d_model % a->heads != 0) {
        throw ConfigError("train: d-model must be divisible by heads");
      }
      config.d_model = a->d_model;
      config.n_layers = a->layers;
      config.n_heads = a->heads;
      config.head_dim = a->d_model / a->heads;
      config.mlp_multiplier = a->mlp_mult;
      config.max_positions = static_cast<long>(packed.target_len);
      config.rope = {a->rope_base, config.head_dim, config.max_positions, config.max_positions,
                     rope::ScalingMode::VanillaNTK};
      config.validate();
      state.params = model::init_parameters<float>(config, a->seed, a->init_std);
      state.optim = train::OptimState::zeros_like(state.params);
    }
    if (static_cast<long>(packed.target_len) > config.max_positions) {
      throw ConfigError("train: packed length " + std::to_string(packed.target_len) +
                        " exceeds model max_positions " + std::to_string(config.max_positions));
    }

    const model::DiffusionTransformer<float> model(config);
    const std::string metadata = json({{"train", self->stable_config()}}).dump();
    const auto save = [&](const train::TrainerState& s) {
      save_checkpoint({config, s.params, s.optim.step, a->seed, s.optim, metadata}, a->out);
    };
    const auto log_path = with_suffix(a->out, ".log.jsonl");
    if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write training log '" + log_path.string() + "'");
    const auto on_step = [&](const train::StepLog& l) {
      log << train::to_json_line(l) << "\n";
      log.flush();
      if (a->log_every > 0 && (l.step % a->log_every == 0 || l.step == tc.total_iters)) {
        out << "step " << l.step << " loss " << l.loss << " lr " << l.lr << " grad_norm "
            << l.grad_norm << "\n";
      }
    };
    try {
      train::run_training(model, state, packed.sequences, tc, tc.total_iters, on_step,
                          a->checkpoint_every, save);
    } catch (...) {
      log.close();
      m.output(log_path);
      throw;
    }
    save(state);
    log.close();
    m.output(a->out);
    m.output(log_path);
  };
  return cmd;
}

struct ExtendArgs {
  std::string checkpoint;
  long target_ctx = 0;
  std::string mode;
  std::string out;
};

std::unique_ptr<Command> make_extend(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<ExtendArgs>();
  cmd->app = root.add_subcommand("extend", "Rescale a checkpoint's RoPE for a longer context");
  cmd->add_required("checkpoint", a->checkpoint, "input checkpoint");
  cmd->add_required("target-ctx", a->target_ctx, "new context length");
  cmd->add_required("mode", a->mode, "vanilla, baseline or diffusion");
  cmd->add_required("out", a->out, "output checkpoint; rope reports go to <out>.rope-before/after.{csv,json}");
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    const auto mode = parse_mode_flag(a->mode);
    m.input(a->checkpoint);
    const auto ckpt = load_checkpoint(a->checkpoint);
    const auto result = train::extend(ckpt, a->target_ctx, mode);
    save_checkpoint(result.checkpoint, a->out);
    m.output(a->out);
    const auto before = rope::rope_report(ckpt.config.rope);
    const auto after = rope::rope_report(result.checkpoint.config.rope);
    write_text_output(m, with_suffix(a->out, ".rope-before.csv"), before.csv);
    write_text_output(m, with_suffix(a->out, ".rope-before.json"), before.json);
    write_text_output(m, with_suffix(a->out, ".rope-after.csv"), after.csv);
    write_text_output(m, with_suffix(a->out, ".rope-after.json"), after.json);
    out << "lambda " << rope::format_significant(result.before.lambda, 9) << " -> "
        << rope::format_significant(result.after.lambda, 9) << ", effective base "
        << rope::format_significant(result.after.effective_base, 9) << ", max_positions "
        << result.checkpoint.config.max_positions << "\n";
  };
  return cmd;
}

model::ModelConfig eval_config(const model::ModelConfig& stored, long max_positions) {
  model::ModelConfig c = stored;
  if (max_positions > 0) {
    if (max_positions < stored.max_positions) {
      throw ConfigError("eval: --max-positions may only raise the checkpoint's window");
    }
    c.max_positions = max_positions;
  }
  return c;
}

struct PplArgs {
  std::string checkpoint;
  std::string text;
  std::vector<long> lengths;
  std::size_t n_mc = 16;
  std::uint64_t seed = 0;
  int threads = 1;
  long max_positions = 0;
  std::string out;
};

std::unique_ptr<Command> make_eval_ppl(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<PplArgs>();
  cmd->app = root.add_subcommand("eval-ppl", "Monte-Carlo denoising perplexity on leading windows of a text");
  cmd->add_required("checkpoint", a->checkpoint, "model checkpoint");
  cmd->add_required("text", a->text, "corpus whose documents are joined with EOD into one token stream");
  cmd->add_required("lengths", a->lengths, "context lengths, strictly increasing")->delimiter(',');
  cmd->add("n-mc", a->n_mc, "Monte-Carlo draws per length");
  cmd->add("seed", a->seed, "draw seed");
  cmd->add("threads", a->threads, "worker threads (results do not depend on it)");
  cmd->add("max-positions", a->max_positions, "evaluate beyond the stored window without rescaling RoPE (0 = stored)");
  cmd->add_required("out", a->out, "output prefix; writes <out>.csv and <out>.json");
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    m.input(a->checkpoint);
    m.input(a->text);
    const auto ckpt = load_checkpoint(a->checkpoint);
    const auto tokens = concatenated_tokens(io::read_corpus(a->text));
    const model::DiffusionTransformer<float> model(eval_config(ckpt.config, a->max_positions));
    const model::TransformerDenoiser<float> denoiser(model, ckpt.params);
    eval::PplOptions o;
    o.n_mc = a->n_mc;
    o.seed = a->seed;
    o.threads = a->threads;
    const auto report = eval::estimate_ppl(denoiser, tokens, a->lengths, o);
    for (const auto& p : eval::emit_reports(report, a->out)) m.output(p);
    out << eval::ppl_csv(report);
  };
  return cmd;
}

struct NiahArgs {
  std::string checkpoint;
  std::vector<long> lengths;
  std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t trials = 4;
  std::size_t gen_len = 32;
  std::size_t block_size = 32;
  std::size_t steps = 32;
  std::string remask = "low_confidence";
  std::uint64_t seed = 0;
  int threads = 1;
  long max_positions = 0;
  std::string out;
};

std::unique_ptr<Command> make_eval_niah(CLI::App& root) {
  auto cmd = std::make_unique<Command>();
  auto a = std::make_shared<NiahArgs>();
  cmd->app = root.add_subcommand("eval-niah", "Needle-in-a-haystack retrieval grid");
  cmd->add_required("checkpoint", a->checkpoint, "model checkpoint");
  cmd->add_required("lengths", a->lengths, "window lengths")->delimiter(',');
  cmd->add("depths", a->depths, "needle depths in [0, 1]")->delimiter(',');
  cmd->add("trials", a->trials, "instances per cell");
  cmd->add("gen-len", a->gen_len, "generated tokens");
  cmd->add("block-size", a->block_size, "decoding block size");
  cmd->add("steps", a->steps, "denoising steps per block");
  cmd->add("remask", a->remask, "low_confidence or random");
  cmd->add("seed", a->seed, "instance and decoding seed");
  cmd->add("threads", a->threads, "worker threads (results do not depend on it)");
  cmd->add("max-positions", a->max_positions, "evaluate beyond the stored window without rescaling RoPE (0 = stored)");
  cmd->add_required("out", a->out, "output prefix; writes <out>.csv and <out>.json");
  cmd->manifest_path = [a] { return with_suffix(a->out, ".manifest.json"); };
  cmd->body = [a](Manifest& m, std::ostream& out) {
    m.input(a->checkpoint);
    const auto ckpt = load_checkpoint(a->checkpoint);
    const model::DiffusionTransformer<float> model(eval_config(ckpt.config, a->max_positions));
    const model::TransformerDenoiser<float> denoiser(model, ckpt.params);
    eval::NiahOptions o;
    o.lengths = a->lengths;
    o.depths = a->depths;
    o.decode = {a->gen_len, a->block_size, a->steps};
    o.trials = a->trials;
    o.seed = a->seed;
    o.threads = a->threads;
    o.remask = a->remask;
    const auto grid = eval::eval_niah(denoiser, o);
    for (const auto& p : eval::emit_reports(grid, a->out)) m.output(p);
    out << eval::niah_csv(grid);
  };
  return cmd;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"longdiff: RoPE extension, packing, training and evaluation for a toy diffusion LM"};
  app.require_subcommand(1);
  app.set_version_flag("--version", LONGDIFF_VERSION);

  std::vector<std::unique_ptr<Command>> commands;
  commands.push_back(make_rope_report(app));
  commands.push_back(make_synth(app));
  commands.push_back(make_pack(app));
  commands.push_back(make_train(app));
  commands.push_back(make_extend(app));
  commands.push_back(make_eval_ppl(app));
  commands.push_back(make_eval_niah(app));
  for (auto& c : commands) {
    c->app->add_option("--config", c->config_path,
                       "JSON file (or a RunManifest) supplying defaults; flags take precedence");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "longdiff: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kConfigError;
  }

  Command* cmd = nullptr;
  for (auto& c : commands) {
    if (c->app->parsed()) cmd = c.get();
  }
  if (cmd == nullptr) return kConfigError;

  const std::string name = cmd->app->get_name();
  Manifest manifest(name);
  std::optional<std::pair<int, std::string>> failure;
  try {
    try {
      apply_config(*cmd);
      check_required(*cmd);
    } catch (const ConfigError& e) {
      err << "longdiff " << name << ": " << e.what() << "\n\n" << cmd->app->help();
      return kConfigError;
    }
    manifest.set_config(cmd->resolved());
    manifest.set_path(cmd->manifest_path());
    cmd->body(manifest, out);
  } catch (const ConfigError& e) {
    failure = {kConfigError, e.what()};
  } catch (const IoError& e) {
    failure = {kIoError, e.what()};
  } catch (const NumericalError& e) {
    failure = {kNumericalError, e.what()};
  } catch (const std::exception& e) {
    failure = {kUnexpected, e.what()};
  }
  if (failure) err << "longdiff " << name << ": " << failure->second << "\n";
  if (manifest.has_path()) {
    try {
      manifest.write(failure);
    } catch (const std::exception& e) {
      err << "longdiff " << name << ": could not write manifest: " << e.what() << "\n";
      if (!failure) failure = {kIoError, e.what()};
    }
  }
  return failure ? failure->first : kOk;
}

}  // namespace longdiff::cli
