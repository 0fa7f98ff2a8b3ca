#include "longdiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "longdiff/corpus_io.hpp"
#include "longdiff/error.hpp"
#include "longdiff/parallel.hpp"
#include "longdiff/rng.hpp"

namespace longdiff::eval {

using nlohmann::json;

namespace {

std::string sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Neumaier-compensated mean.
long double mean_of(std::span<const long double> values) {
  long double sum = 0.0L;
  long double carry = 0.0L;
  for (const long double v : values) {
    const long double t = sum + v;
    carry += std::fabs(sum) >= std::fabs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  return (sum + carry) / static_cast<long double>(values.size());
}

// Mean masked-token NLL carried in extended precision, so that exp of an average of
// identical values reproduces the underlying probability to double rounding.
long double masked_nll_extended(const model::Matrix<double>& logits, const model::NoisySample& sample) {
  std::vector<long double> nll;
  nll.reserve(sample.masked_positions.size());
  for (const std::size_t i : sample.masked_positions) {
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const long double m = row.maxCoeff();
    long double z = 0.0L;
    for (Eigen::Index v = 0; v < row.size(); ++v) z += std::exp(static_cast<long double>(row[v]) - m);
    nll.push_back(m + std::log(z) - static_cast<long double>(row[sample.x0[i]]));
  }
  return mean_of(nll);
}

}  // namespace

PplReport estimate_ppl(const model::Denoiser& model, std::span<const TokenId> tokens,
                       std::span<const long> context_lengths, const PplOptions& options) {
  if (context_lengths.empty()) {
    throw ConfigError("ppl: no context lengths");
  }
  if (options.n_mc == 0) {
    throw ConfigError("ppl: n_mc must be positive");
  }
  if (options.forced_t && !(*options.forced_t > 0.0 && *options.forced_t <= 1.0)) {
    throw ConfigError("ppl: forced t must lie in (0, 1]");
  }
  for (std::size_t i = 0; i < context_lengths.size(); ++i) {
    const long l = context_lengths[i];
    if (l <= 0 || (i > 0 && l <= context_lengths[i - 1])) {
      throw ConfigError("ppl: context lengths must be positive and strictly increasing");
    }
    if (static_cast<std::size_t>(l) > tokens.size()) {
      throw ConfigError("ppl: window of " + std::to_string(l) + " tokens is longer than the " +
                        std::to_string(tokens.size()) + "-token text");
    }
    if (l > model.max_positions()) {
      throw ConfigError("ppl: window of " + std::to_string(l) + " exceeds model max_positions");
    }
  }

  PplReport report;
  report.context_lengths.assign(context_lengths.begin(), context_lengths.end());
  report.n_mc = options.n_mc;
  report.seed = options.seed;
  const std::size_t n_len = context_lengths.size();
  report.draw_t.assign(n_len, std::vector<double>(options.n_mc));
  report.draw_nll.assign(n_len, std::vector<double>(options.n_mc));

  std::vector<std::vector<long double>> exact(n_len, std::vector<long double>(options.n_mc));
  parallel_for(n_len * options.n_mc, options.threads, [&](std::size_t job) {
    const std::size_t li = job / options.n_mc;
    const std::size_t draw = job % options.n_mc;
    const auto l = static_cast<std::size_t>(context_lengths[li]);
    const auto window = tokens.first(l);
    const AttentionMask mask(MaskSpec::full(), l);
    for (std::uint64_t attempt = 0;; ++attempt) {
      std::mt19937_64 rng(derive_seed(options.seed, {l, draw, attempt}));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double t = options.forced_t ? *options.forced_t : u(rng);
      const auto sample = model::corrupt(window, t, rng, model.mask_id());
      if (sample.masked_positions.empty()) continue;
      const auto logits = model.logits(sample.xt, mask);
      report.draw_t[li][draw] = t;
      exact[li][draw] = masked_nll_extended(logits, sample);
      report.draw_nll[li][draw] = static_cast<double>(exact[li][draw]);
      break;
    }
  });

  for (std::size_t li = 0; li < n_len; ++li) {
    report.ppl.push_back(static_cast<double>(std::exp(mean_of(exact[li]))));
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kFiller[] = {
    "The grass is green. ",
    "The sky is blue. ",
    "The sun is yellow. ",
    "Here we go. ",
    "There and back again. ",
    "The river flows past the old mill. ",
    "Birds sing in the morning light. ",
    "A quiet wind moves through the trees. ",
};

constexpr const char* kKeys[] = {
    "amber",  "cobalt", "crimson", "falcon",  "garnet", "harbor", "ivory",  "juniper",
    "lantern", "meadow", "orchid",  "quartz",  "saffron", "tundra", "willow", "zephyr",
};

std::string needle_text(const std::string& key, const std::string& value) {
  return "The code of " + key + " is " + value + ". ";
}

std::string question_text(const std::string& key) {
  return "What is the code of " + key + "? The code of " + key + " is ";
}

std::string longest_key() {
  std::string best;
  for (const char* k : kKeys) {
    if (std::string(k).size() > best.size()) best = k;
  }
  return best;
}

std::string filler(std::size_t n, std::mt19937_64& rng) {
  std::string out;
  std::uniform_int_distribution<std::size_t> pick(0, std::size(kFiller) - 1);
  while (out.size() < n) out += kFiller[pick(rng)];
  out.resize(n);
  return out;
}

}  // namespace

std::size_t max_question_length() { return question_text(longest_key()).size(); }

std::size_t max_needle_length() { return needle_text(longest_key(), "000000").size(); }

NiahInstance gen_niah(std::size_t haystack_len, double depth, std::mt19937_64& rng) {
  if (!(depth >= 0.0 && depth <= 1.0)) {
    throw ConfigError("niah: depth must lie in [0, 1]");
  }
  std::uniform_int_distribution<std::size_t> pick_key(0, std::size(kKeys) - 1);
  std::uniform_int_distribution<int> pick_value(100000, 999999);
  NiahInstance inst;
  inst.key = kKeys[pick_key(rng)];
  inst.value = std::to_string(pick_value(rng));
  const std::string needle = needle_text(inst.key, inst.value);
  const std::string question = question_text(inst.key);
  if (haystack_len < needle.size() + question.size()) {
    throw ConfigError("niah: haystack of " + std::to_string(haystack_len) +
                      " tokens is too small for the needle and question");
  }
  inst.needle_len = needle.size();
  inst.needle_start = static_cast<std::size_t>(
      std::floor(depth * static_cast<double>(haystack_len - needle.size())));
  const std::string pad = filler(haystack_len - needle.size(), rng);
  const std::string context =
      pad.substr(0, inst.needle_start) + needle + pad.substr(inst.needle_start);
  inst.context = encode_bytes(context);
  inst.question = encode_bytes(question);
  inst.answer = encode_bytes(inst.value);
  return inst;
}

std::vector<TokenId> niah_training_document(std::size_t total_len, std::size_t gen_len,
                                            double depth, std::mt19937_64& rng) {
  if (total_len < gen_len + max_question_length() + max_needle_length() + max_question_length()) {
    throw ConfigError("niah: training document length too small");
  }
  const std::size_t haystack = total_len - gen_len - max_question_length();
  const auto inst = gen_niah(haystack, depth, rng);
  std::vector<TokenId> doc = inst.context;
  doc.insert(doc.end(), inst.question.begin(), inst.question.end());
  doc.insert(doc.end(), inst.answer.begin(), inst.answer.end());
  const auto tail = encode_bytes(". " + filler(total_len, rng));
  doc.insert(doc.end(), tail.begin(), tail.end());
  doc.resize(total_len);
  return doc;
}

std::vector<Document> make_niah_corpus(std::size_t n_docs, std::size_t min_len,
                                       std::size_t max_len, std::size_t gen_len,
                                       std::uint64_t seed) {
  if (n_docs == 0 || min_len > max_len) {
    throw ConfigError("niah: invalid corpus request");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_real_distribution<double> depth(0.0, 1.0);
  std::vector<Document> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const std::size_t l = len(rng);
    const double d = depth(rng);
    docs.push_back({"niah-" + std::to_string(i), niah_training_document(l, gen_len, d, rng)});
  }
  return docs;
}

bool contains_span(std::span<const TokenId> haystack, std::span<const TokenId> needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

bool NiahGrid::operator==(const NiahGrid& o) const {
  return lengths == o.lengths && depths == o.depths && accuracy == o.accuracy &&
         decode.gen_len == o.decode.gen_len && decode.block_size == o.decode.block_size &&
         decode.steps == o.decode.steps && trials == o.trials && seed == o.seed &&
         remask == o.remask;
}

NiahGrid eval_niah(const model::Denoiser& model, const NiahOptions& options) {
  options.decode.validate();
  if (options.lengths.empty() || options.depths.empty()) {
    throw ConfigError("niah: lengths and depths must be non-empty");
  }
  if (options.trials == 0) {
    throw ConfigError("niah: trials must be positive");
  }
  for (const long l : options.lengths) {
    if (l > model.max_positions()) {
      throw ConfigError("niah: length " + std::to_string(l) + " exceeds model max_positions");
    }
    const long overhead = static_cast<long>(options.decode.gen_len + max_question_length());
    if (l - overhead < static_cast<long>(max_needle_length() + max_question_length())) {
      throw ConfigError("niah: decode config leaves no room for a haystack at length " +
                        std::to_string(l));
    }
  }
  for (const double d : options.depths) {
    if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("niah: depths must lie in [0, 1]");
  }
  const auto policy = model::make_remask_policy(options.remask);

  NiahGrid grid;
  grid.lengths = options.lengths;
  grid.depths = options.depths;
  grid.decode = options.decode;
  grid.trials = options.trials;
  grid.seed = options.seed;
  grid.remask = options.remask;

  const std::size_t nl = options.lengths.size();
  const std::size_t nd = options.depths.size();
  std::vector<std::uint8_t> hits(nl * nd * options.trials, 0);
  parallel_for(hits.size(), options.threads, [&](std::size_t job) {
    const std::size_t li = job / (nd * options.trials);
    const std::size_t di = (job / options.trials) % nd;
    const std::size_t trial = job % options.trials;
    const auto l = static_cast<std::size_t>(options.lengths[li]);
    std::mt19937_64 rng(derive_seed(options.seed, {l, di, trial}));
    const std::size_t haystack = l - options.decode.gen_len - max_question_length();
    const auto inst = gen_niah(haystack, options.depths[di], rng);
    std::vector<TokenId> prompt = inst.context;
    prompt.insert(prompt.end(), inst.question.begin(), inst.question.end());
    const auto out = model::denoise_generate(model, prompt, options.decode, *policy, rng);
    hits[job] = contains_span(out, inst.answer) ? 1 : 0;
  });

  grid.accuracy.assign(nl, std::vector<double>(nd, 0.0));
  for (std::size_t li = 0; li < nl; ++li) {
    for (std::size_t di = 0; di < nd; ++di) {
      std::size_t n = 0;
      for (std::size_t t = 0; t < options.trials; ++t) {
        n += hits[(li * nd + di) * options.trials + t];
      }
      grid.accuracy[li][di] = static_cast<double>(n) / static_cast<double>(options.trials);
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Emission

namespace {

void check_report(const PplReport& r) {
  if (r.context_lengths.empty()) throw ConfigError("report: empty context_lengths");
  if (r.ppl.size() != r.context_lengths.size()) {
    throw ConfigError("report: ppl and context_lengths sizes differ");
  }
}

void check_grid(const NiahGrid& g) {
  if (g.lengths.empty() || g.depths.empty()) throw ConfigError("report: empty lengths or depths");
  if (g.accuracy.size() != g.lengths.size()) throw ConfigError("report: accuracy row count");
  for (const auto& row : g.accuracy) {
    if (row.size() != g.depths.size()) throw ConfigError("report: accuracy column count");
  }
}

}  // namespace

std::string ppl_csv(const PplReport& r) {
  check_report(r);
  std::string out = "length,ppl\n";
  for (std::size_t i = 0; i < r.ppl.size(); ++i) {
    out += std::to_string(r.context_lengths[i]) + "," + sig6(r.ppl[i]) + "\n";
  }
  return out;
}

std::string ppl_json(const PplReport& r) {
  check_report(r);
  json j = {{"kind", "ppl"},
            {"method", "monte-carlo masked denoising NLL, t ~ U(0,1), zero-mask draws redrawn"},
            {"context_lengths", r.context_lengths},
            {"ppl", r.ppl},
            {"n_mc", r.n_mc},
            {"seed", r.seed},
            {"draw_t", r.draw_t},
            {"draw_nll", r.draw_nll}};
  return j.dump(2) + "\n";
}

PplReport parse_ppl_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    PplReport r;
    r.context_lengths = j.at("context_lengths").get<std::vector<long>>();
    r.ppl = j.at("ppl").get<std::vector<double>>();
    r.n_mc = j.at("n_mc").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.draw_t = j.at("draw_t").get<std::vector<std::vector<double>>>();
    r.draw_nll = j.at("draw_nll").get<std::vector<std::vector<double>>>();
    check_report(r);
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("ppl report: ") + e.what());
  }
}

std::string niah_csv(const NiahGrid& g) {
  check_grid(g);
  std::string out = "length";
  for (const double d : g.depths) out += "," + sig6(d);
  out += "\n";
  for (std::size_t i = 0; i < g.lengths.size(); ++i) {
    out += std::to_string(g.lengths[i]);
    for (const double a : g.accuracy[i]) out += "," + sig6(a);
    out += "\n";
  }
  return out;
}

std::string niah_json(const NiahGrid& g) {
  check_grid(g);
  json j = {{"kind", "niah"},
            {"lengths", g.lengths},
            {"depths", g.depths},
            {"accuracy", g.accuracy},
            {"decode",
             {{"gen_len", g.decode.gen_len},
              {"block_size", g.decode.block_size},
              {"steps", g.decode.steps}}},
            {"trials", g.trials},
            {"seed", g.seed},
            {"remask", g.remask}};
  return j.dump(2) + "\n";
}

NiahGrid parse_niah_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    NiahGrid g;
    g.lengths = j.at("lengths").get<std::vector<long>>();
    g.depths = j.at("depths").get<std::vector<double>>();
    g.accuracy = j.at("accuracy").get<std::vector<std::vector<double>>>();
    g.decode.gen_len = j.at("decode").at("gen_len").get<std::size_t>();
    g.decode.block_size = j.at("decode").at("block_size").get<std::size_t>();
    g.decode.steps = j.at("decode").at("steps").get<std::size_t>();
    g.trials = j.at("trials").get<std::size_t>();
    g.seed = j.at("seed").get<std::uint64_t>();
    g.remask = j.at("remask").get<std::string>();
    check_grid(g);
    return g;
  } catch (const json::exception& e) {
    throw IoError(std::string("niah report: ") + e.what());
  }
}

namespace {

std::vector<std::filesystem::path> write_pair(const std::filesystem::path& prefix,
                                              const std::string& csv, const std::string& js) {
  std::filesystem::path csv_path = prefix;
  csv_path += ".csv";
  std::filesystem::path json_path = prefix;
  json_path += ".json";
  io::write_file(csv_path, csv);
  io::write_file(json_path, js);
  return {csv_path, json_path};
}

}  // namespace

std::vector<std::filesystem::path> emit_reports(const PplReport& report,
                                                const std::filesystem::path& prefix) {
  return write_pair(prefix, ppl_csv(report), ppl_json(report));
}

std::vector<std::filesystem::path> emit_reports(const NiahGrid& grid,
                                                const std::filesystem::path& prefix) {
  return write_pair(prefix, niah_csv(grid), niah_json(grid));
}

}  // namespace longdiff::eval
