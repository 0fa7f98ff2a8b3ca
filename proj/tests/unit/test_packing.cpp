#include <doctest.h>

#include <random>

#include "longdiff/error.hpp"
#include "longdiff/packing.hpp"

using namespace longdiff;

namespace {

constexpr TokenId kEod = 1000;

std::vector<Document> docs_of_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<Document> docs;
  TokenId next = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Document d{"doc" + std::to_string(i), {}};
    for (std::size_t k = 0; k < lengths[i]; ++k) d.tokens.push_back(next++);
    docs.push_back(std::move(d));
  }
  return docs;
}

struct RefSequence {
  std::vector<TokenId> tokens;
  std::vector<std::uint32_t> segments;
};

// Brute force: lay out one flat stream tagged by document, cut every target_len
// positions, drop the remainder, then number tag runs within each sequence.
std::vector<RefSequence> reference_pack(const std::vector<Document>& docs, std::size_t target_len,
                                        bool eod) {
  std::vector<TokenId> stream;
  std::vector<std::size_t> tag;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    for (const TokenId t : docs[i].tokens) {
      stream.push_back(t);
      tag.push_back(i);
    }
    if (eod) {
      stream.push_back(kEod);
      tag.push_back(i);
    }
  }
  std::vector<RefSequence> out;
  for (std::size_t s = 0; (s + 1) * target_len <= stream.size(); ++s) {
    RefSequence r;
    std::uint32_t seg = 0;
    for (std::size_t k = 0; k < target_len; ++k) {
      const std::size_t p = s * target_len + k;
      if (k > 0 && tag[p] != tag[p - 1]) ++seg;
      r.tokens.push_back(stream[p]);
      r.segments.push_back(seg);
    }
    out.push_back(std::move(r));
  }
  return out;
}

PackConfig config(std::size_t len, PackStrategy s) { return {len, s, {kEod, std::nullopt}}; }

std::vector<std::uint32_t> runs(std::initializer_list<std::pair<std::uint32_t, std::size_t>> r) {
  std::vector<std::uint32_t> out;
  for (const auto& [id, n] : r) out.insert(out.end(), n, id);
  return out;
}

}  // namespace

TEST_CASE("DirectCat [10, 20, 5] into 32") {
  const auto docs = docs_of_lengths({10, 20, 5});
  PackStats stats;
  const auto seqs = pack(docs, config(32, PackStrategy::DirectCat), &stats);
  REQUIRE(seqs.size() == 1);
  std::vector<TokenId> expected;
  for (TokenId t = 0; t < 32; ++t) expected.push_back(t);
  CHECK(seqs[0].tokens == expected);
  CHECK(seqs[0].segment_ids == runs({{0, 10}, {1, 20}, {2, 2}}));
  CHECK(stats.dropped_tokens == 3);
  CHECK(stats.emitted_tokens == 32);
}

TEST_CASE("EodCat [10, 20, 5] into 32 matches the brute-force packer") {
  const auto docs = docs_of_lengths({10, 20, 5});
  const auto ref = reference_pack(docs, 32, true);
  REQUIRE(ref.size() == 1);
  // Hand layout: doc0 at 0-9, EOD at 10, doc1 at 11-30, EOD at 31; doc2 is the trailer.
  std::vector<TokenId> hand;
  for (TokenId t = 0; t < 10; ++t) hand.push_back(t);
  hand.push_back(kEod);
  for (TokenId t = 10; t < 30; ++t) hand.push_back(t);
  hand.push_back(kEod);
  REQUIRE(ref[0].tokens == hand);

  PackStats stats;
  const auto seqs = pack(docs, config(32, PackStrategy::EodCat), &stats);
  REQUIRE(seqs.size() == 1);
  CHECK(seqs[0].tokens == hand);
  CHECK(seqs[0].segment_ids == runs({{0, 11}, {1, 21}}));
  CHECK(stats.eod_tokens == 2);
  CHECK(stats.dropped_tokens == 5);
  REQUIRE(seqs[0].provenance.size() == 2);
  CHECK(seqs[0].provenance[1] == ProvenanceSpan{"doc1", 1, 0, 20, 11});
}

TEST_CASE("a long document is split and carried") {
  const auto docs = docs_of_lengths({70});
  const auto seqs = pack(docs, config(32, PackStrategy::AdaptiveMask));
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].provenance == std::vector<ProvenanceSpan>{{"doc0", 0, 0, 32, 0}});
  CHECK(seqs[1].provenance == std::vector<ProvenanceSpan>{{"doc0", 0, 32, 64, 0}});
  CHECK(seqs[1].segment_ids == std::vector<std::uint32_t>(32, 0));
}

TEST_CASE("an EOD that overflows opens the next sequence as its own segment") {
  const auto docs = docs_of_lengths({8, 5, 20});
  const auto seqs = pack(docs, config(8, PackStrategy::EodCat));
  const auto ref = reference_pack(docs, 8, true);
  REQUIRE(seqs.size() == ref.size());
  CHECK(seqs[1].tokens[0] == kEod);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    CHECK(seqs[s].tokens == ref[s].tokens);
    CHECK(seqs[s].segment_ids == ref[s].segments);
    CHECK_NOTHROW(validate_sequence(seqs[s], 8, kEod));
  }
}

TEST_CASE("packing rejects bad input") {
  CHECK_THROWS_AS(pack({}, config(32, PackStrategy::DirectCat)), ConfigError);
  const std::vector<Document> with_eod{{"a", {1, kEod, 2}}};
  CHECK_THROWS_AS(pack(with_eod, config(4, PackStrategy::EodCat)), ConfigError);
  const std::vector<Document> empty_doc{{"a", {}}};
  CHECK_THROWS_AS(pack(empty_doc, config(4, PackStrategy::DirectCat)), ConfigError);
  CHECK_THROWS_AS(pack(docs_of_lengths({4}), config(1, PackStrategy::DirectCat)), ConfigError);
  PackConfig masked = config(4, PackStrategy::DirectCat);
  masked.special.mask_id = 7;
  const std::vector<Document> with_mask{{"a", {7, 1}}};
  CHECK_THROWS_AS(pack(with_mask, masked), ConfigError);
}

TEST_CASE("random corpora: conservation, reference agreement and round-trip") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> n_docs(1, 12);
    std::uniform_int_distribution<std::size_t> doc_len(1, 90);
    std::uniform_int_distribution<std::size_t> target(2, 64);
    std::uniform_int_distribution<int> strat(0, 2);
    std::vector<std::size_t> lengths(n_docs(rng));
    for (auto& l : lengths) l = doc_len(rng);
    const auto docs = docs_of_lengths(lengths);
    const std::size_t len = target(rng);
    const auto strategy = static_cast<PackStrategy>(strat(rng));
    const bool eod = strategy == PackStrategy::EodCat;
    INFO("trial ", trial, " target ", len, " strategy ", to_string(strategy));

    PackStats stats;
    std::vector<PackedSequence> seqs;
    try {
      seqs = pack(docs, config(len, strategy), &stats);
    } catch (const ConfigError&) {
      FAIL("pack threw");
    }
    const auto ref = reference_pack(docs, len, eod);
    REQUIRE(seqs.size() == ref.size());

    std::size_t input = 0;
    for (const auto l : lengths) input += l;
    CHECK(stats.input_tokens == input);
    CHECK(stats.emitted_tokens + stats.dropped_tokens == input);
    CHECK(stats.sequences == seqs.size());

    std::size_t non_eod = 0;
    std::vector<Fragment> fragments;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      CHECK(seqs[s].tokens == ref[s].tokens);
      CHECK(seqs[s].segment_ids == ref[s].segments);
      CHECK_NOTHROW(validate_sequence(seqs[s], len, kEod));
      for (const TokenId t : seqs[s].tokens) non_eod += t != kEod;
      auto parts = unpack(seqs[s]);
      for (auto& f : parts) {
        const auto& src = docs[f.doc_index].tokens;
        REQUIRE(f.source_start + f.tokens.size() <= src.size());
        CHECK(std::equal(f.tokens.begin(), f.tokens.end(), src.begin() + f.source_start));
        fragments.push_back(std::move(f));
      }
    }
    CHECK(non_eod == stats.emitted_tokens);
    const auto whole = reassemble(fragments);
    for (const auto& [index, tokens] : whole) {
      const auto& src = docs[index].tokens;
      REQUIRE(tokens.size() <= src.size());
      CHECK(std::equal(tokens.begin(), tokens.end(), src.begin()));
    }
  }
}

TEST_CASE("streaming packer emits sequences before finish") {
  std::vector<PackedSequence> got;
  Packer packer(config(16, PackStrategy::AdaptiveMask),
                [&got](PackedSequence&& s) { got.push_back(std::move(s)); });
  const auto docs = docs_of_lengths({20, 3});
  packer.push(docs[0]);
  CHECK(got.size() == 1);
  packer.push(docs[1]);
  const auto stats = packer.finish();
  CHECK(got.size() == 1);
  CHECK(stats.dropped_tokens == 7);
  CHECK_THROWS_AS(packer.push(docs[1]), ConfigError);
}

TEST_CASE("validate_sequence catches broken invariants") {
  auto seq = pack(docs_of_lengths({5, 5, 10}), config(12, PackStrategy::EodCat))[0];
  CHECK_NOTHROW(validate_sequence(seq, 12, kEod));
  auto decreasing = seq;
  decreasing.segment_ids[11] = 0;
  CHECK_THROWS_AS(validate_sequence(decreasing, 12, kEod), ConfigError);
  auto stray = seq;
  stray.tokens[2] = kEod;
  CHECK_THROWS_AS(validate_sequence(stray, 12, kEod), ConfigError);
  CHECK_THROWS_AS(validate_sequence(seq, 13, kEod), ConfigError);
  auto bad_span = seq;
  bad_span.provenance[0].source_end = 50;
  CHECK_THROWS_AS(unpack(bad_span), ConfigError);
}

TEST_CASE("mask matrices") {
  const AttentionMask seg(MaskSpec::segments({0, 0, 1}), 3);
  CHECK(seg.dense() == std::vector<std::uint8_t>{1, 1, 0, 1, 1, 0, 0, 0, 1});
  const AttentionMask causal(MaskSpec::causal(), 3);
  CHECK(causal.dense() == std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  const AttentionMask same(MaskSpec::segments({4, 4, 4, 4}), 4);
  CHECK(same.dense() == AttentionMask(MaskSpec::full(), 4).dense());
  CHECK(seg.blocks().size() == 2);
  CHECK(seg.blocks()[1].begin == 2);
  CHECK_THROWS_AS(AttentionMask(MaskSpec::segments({0, 1}), 3), ConfigError);
  CHECK_THROWS_AS(AttentionMask(MaskSpec::segments({0, 1, 0}), 3), ConfigError);
  CHECK_THROWS_AS(AttentionMask(MaskSpec::full(), kMaxDenseMaskLength + 1).dense(), ConfigError);
}

TEST_CASE("mask density matches counting") {
  CHECK(mask_density(MaskSpec::causal(), 4) == doctest::Approx(0.625).epsilon(1e-15));
  CHECK(mask_density(MaskSpec::segments({0, 0, 1, 1}), 4) ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK(mask_density(MaskSpec::full(), 9) == 1.0);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint32_t> ids;
    std::uint32_t seg = 0;
    std::bernoulli_distribution next(0.2);
    for (int i = 0; i < 40; ++i) {
      if (i > 0 && next(rng)) ++seg;
      ids.push_back(seg);
    }
    const MaskSpec spec = MaskSpec::segments(ids);
    const auto dense = AttentionMask(spec, ids.size()).dense();
    std::size_t allowed = 0;
    for (const auto v : dense) allowed += v;
    CHECK(mask_density(spec, ids.size()) ==
          doctest::Approx(static_cast<double>(allowed) / dense.size()).epsilon(1e-14));
  }
}

TEST_CASE("mask_for follows the strategy") {
  const auto docs = docs_of_lengths({3, 5});
  const auto adaptive = pack(docs, config(8, PackStrategy::AdaptiveMask))[0];
  CHECK(mask_for(adaptive).kind == MaskKind::SegmentBlockDiagonal);
  CHECK(mask_for(adaptive).segment_ids == adaptive.segment_ids);
  const auto direct = pack(docs, config(8, PackStrategy::DirectCat))[0];
  CHECK(mask_for(direct).kind == MaskKind::FullBidirectional);
}

TEST_CASE("strategy names") {
  CHECK(parse_strategy("eod") == PackStrategy::EodCat);
  CHECK(parse_strategy("adaptive") == PackStrategy::AdaptiveMask);
  CHECK(parse_strategy("direct") == PackStrategy::DirectCat);
  CHECK_THROWS_AS(parse_strategy("nope"), ConfigError);
}
