#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "longdiff/generate.hpp"

namespace longdiff::eval {

// ---------------------------------------------------------------------------
// Monte-Carlo denoising perplexity. This is exp of the mean masked-token NLL over random
// (t, mask) draws; it is not strictly identical to auto-regressive next-token perplexity.

struct PplReport {
  std::vector<long> context_lengths;
  std::vector<double> ppl;
  std::size_t n_mc = 0;
  std::uint64_t seed = 0;
  // Per length: the noise level and mean NLL of every accepted draw (diagnostics).
  std::vector<std::vector<double>> draw_t;
  std::vector<std::vector<double>> draw_nll;

  bool operator==(const PplReport&) const = default;
};

struct PplOptions {
  std::size_t n_mc = 16;
  std::uint64_t seed = 0;
  int threads = 1;
  // Fixes t for every draw instead of t ~ U(0, 1).
  std::optional<double> forced_t;
};

/// For each length l, scores the leading l tokens n_mc times. Draws that mask nothing
/// are redrawn. Results depend only on (seed, length, draw), never on `threads`.
PplReport estimate_ppl(const model::Denoiser& model, std::span<const TokenId> tokens,
                       std::span<const long> context_lengths, const PplOptions& options);

// ---------------------------------------------------------------------------
// Needle in a haystack

struct NiahInstance {
  std::vector<TokenId> context;
  std::vector<TokenId> question;
  std::vector<TokenId> answer;
  std::size_t needle_start = 0;
  std::size_t needle_len = 0;
  std::string key;
  std::string value;
};

/// Longest question the generator can produce, in tokens.
std::size_t max_question_length();
/// Needle length for the longest key, in tokens.
std::size_t max_needle_length();

/// Context of exactly haystack_len byte tokens: digit-free filler sentences with one
/// key/value needle starting at floor(depth * (haystack_len - needle_len)).
NiahInstance gen_niah(std::size_t haystack_len, double depth, std::mt19937_64& rng);

/// Training document shaped like an evaluation window of `total_len` tokens:
/// context, question, answer, then filler up to the decode length `gen_len`.
std::vector<TokenId> niah_training_document(std::size_t total_len, std::size_t gen_len,
                                            double depth, std::mt19937_64& rng);

/// Synthetic corpus of NIAH-style documents with lengths uniform in [min_len, max_len].
std::vector<Document> make_niah_corpus(std::size_t n_docs, std::size_t min_len,
                                       std::size_t max_len, std::size_t gen_len,
                                       std::uint64_t seed);

struct NiahGrid {
  std::vector<long> lengths;
  std::vector<double> depths;
  std::vector<std::vector<double>> accuracy;  // lengths x depths
  model::DecodeConfig decode;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::string remask = "low_confidence";

  bool operator==(const NiahGrid& other) const;
};

struct NiahOptions {
  std::vector<long> lengths;
  std::vector<double> depths;
  model::DecodeConfig decode;
  std::size_t trials = 4;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string remask = "low_confidence";
};

/// A cell length is the full model window: haystack + question + gen_len <= length.
/// Accuracy is the fraction of trials whose generated tokens contain the answer span.
NiahGrid eval_niah(const model::Denoiser& model, const NiahOptions& options);

/// True when `needle` occurs as a contiguous run inside `haystack`.
bool contains_span(std::span<const TokenId> haystack, std::span<const TokenId> needle);

// ---------------------------------------------------------------------------
// Report emission. Floats in CSV use 6 significant digits; JSON carries exact values.

std::string ppl_csv(const PplReport& report);
std::string ppl_json(const PplReport& report);
PplReport parse_ppl_json(const std::string& text);

/// Header row "length,<depths...>", one row per length.
std::string niah_csv(const NiahGrid& grid);
std::string niah_json(const NiahGrid& grid);
NiahGrid parse_niah_json(const std::string& text);

/// Writes <prefix>.csv and <prefix>.json; returns the paths written.
std::vector<std::filesystem::path> emit_reports(const PplReport& report,
                                                const std::filesystem::path& prefix);
std::vector<std::filesystem::path> emit_reports(const NiahGrid& grid,
                                                const std::filesystem::path& prefix);

}  // namespace longdiff::eval
