#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnlink/eval.hpp"
#include "attnlink/train.hpp"
#include "attnlink/vocab_ids.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace attnlink;

namespace {

std::vector<std::vector<std::string>> sentences(std::vector<std::string> lines) {
  std::vector<std::vector<std::string>> out;
  for (const std::string& l : lines) out.push_back(tokenize(l));
  return out;
}

ModelConfig tiny_config(std::int64_t src_vocab, std::int64_t tgt_vocab) {
  ModelConfig c;
  c.d = 8;
  c.d_q = c.d_k = c.d_v = 8;
  c.d_hidden = 16;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.placement = LinkPlacement::both;
  c.dropout = 0.0;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.max_seq_len = 32;
  return c;
}

AttentionRecord record_of(std::vector<Tensor> probs) {
  AttentionRecord rec;
  rec.probs = std::move(probs);
  for (const Tensor& p : rec.probs) rec.logits.push_back(Tensor::zeros(p.shape()));
  return rec;
}

}  // namespace

TEST_CASE("[DERIVED] bleu clips repeated n-grams against reference counts") {
  // hyp "the the the the" vs ref "the cat": only one "the" is creditable, so
  // p1 = 1/4 by hand count; no bigram matches, so the score collapses to 0.
  BleuBreakdown b = corpus_bleu(sentences({"the cat"}), sentences({"the the the the"}));
  CHECK(b.precisions[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(b.precisions[1] == 0.0);
  CHECK(b.precisions[2] == 0.0);
  CHECK(b.precisions[3] == 0.0);
  CHECK(b.brevity_penalty == 1.0);  // hyp_len 4 >= ref_len 2
  CHECK(b.hyp_len == 4);
  CHECK(b.ref_len == 2);
  CHECK(b.score == 0.0);
}

TEST_CASE("[DERIVED] bleu breakdown on a near-miss sentence") {
  // ref a b c d e f g, hyp a b c d x f g. Hand counts:
  //   1-grams: 6/7 (x unmatched)     2-grams: ab bc cd fg of 6 -> 4/6
  //   3-grams: abc bcd of 5 -> 2/5   4-grams: abcd of 4 -> 1/4
  BleuBreakdown b = corpus_bleu(sentences({"a b c d e f g"}), sentences({"a b c d x f g"}));
  CHECK(b.precisions[0] == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
  CHECK(b.precisions[1] == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(b.precisions[2] == doctest::Approx(2.0 / 5.0).epsilon(1e-12));
  CHECK(b.precisions[3] == doctest::Approx(1.0 / 4.0).epsilon(1e-12));
  CHECK(b.brevity_penalty == 1.0);
  CHECK(b.score ==
        doctest::Approx(std::pow(6.0 / 7.0 * 4.0 / 6.0 * 2.0 / 5.0 * 1.0 / 4.0, 0.25))
            .epsilon(1e-12));
}

TEST_CASE("[DERIVED] corpus bleu pools counts and applies the brevity penalty") {
  // Sentence 1 is exact (4 tokens). Sentence 2 is a 3-token prefix of a
  // 5-token reference, so every pooled precision stays 1 (the short sentence
  // contributes no 4-grams at all) and only the brevity penalty bites:
  // c = 7, r = 9, BP = exp(1 - 9/7).
  BleuBreakdown b =
      corpus_bleu(sentences({"a b a c", "x y z w q"}), sentences({"a b a c", "x y z"}));
  for (int n = 0; n < 4; ++n) CHECK(b.precisions[n] == 1.0);
  CHECK(b.hyp_len == 7);
  CHECK(b.ref_len == 9);
  CHECK(b.brevity_penalty == doctest::Approx(std::exp(1.0 - 9.0 / 7.0)).epsilon(1e-12));
  CHECK(b.score == doctest::Approx(std::exp(1.0 - 9.0 / 7.0)).epsilon(1e-12));
}

TEST_CASE("[DERIVED] bleu partial clipping keeps lower-order precisions") {
  // ref b b b a / hyp b b a a: p1 = (min(2,3)+min(2,1))/4 = 3/4,
  // p2 = (bb:1, ba:1)/3 = 2/3, p3 = (bba)/2 = 1/2, p4 = 0/1.
  BleuBreakdown b = corpus_bleu(sentences({"b b b a"}), sentences({"b b a a"}));
  CHECK(b.precisions[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(b.precisions[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(b.precisions[2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(b.precisions[3] == 0.0);
  CHECK(b.score == 0.0);
  CHECK(b.brevity_penalty == 1.0);
}

TEST_CASE("[TRIVIAL] bleu of a corpus against itself is one") {
  auto corpus = sentences({"a b c d", "q w e r t y", "one two three four five"});
  BleuBreakdown b = corpus_bleu(corpus, corpus);
  for (int n = 0; n < 4; ++n) CHECK(b.precisions[n] == 1.0);
  CHECK(b.brevity_penalty == 1.0);
  CHECK(b.score == 1.0);
}

TEST_CASE("[TRIVIAL] bleu handles empty hypotheses and rejects malformed input") {
  BleuBreakdown b = corpus_bleu(sentences({"a b c d"}), {std::vector<std::string>{}});
  CHECK(b.hyp_len == 0);
  CHECK(b.brevity_penalty == 0.0);
  CHECK(b.score == 0.0);
  for (int n = 0; n < 4; ++n) CHECK(b.precisions[n] == 0.0);

  CHECK_THROWS_AS(corpus_bleu(sentences({"a", "b"}), sentences({"a"})), std::invalid_argument);
  CHECK_THROWS_AS(corpus_bleu({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(corpus_bleu({std::vector<std::string>{}}, sentences({"a"})),
                  std::invalid_argument);
}

TEST_CASE("[DERIVED] attention entropy normalization closed forms") {
  SUBCASE("uniform rows have normalized entropy one") {
    Tensor p = Tensor::constant({2, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3});
    EntropyStats s = attention_entropy(record_of({p}));
    CHECK(s.rows == 2);
    CHECK(s.single_option_rows == 0);
    CHECK(s.mean_normalized == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("hand-computed skewed rows") {
    // Both rows normalize by ln(width) = ln 3, masked zero included.
    // Row 1: (1/2, 1/4, 1/4) -> H = 1.5 ln 2.
    // Row 2: (3/4, 1/4, 0)   -> H = -(0.75 ln 0.75 + 0.25 ln 0.25).
    Tensor p = Tensor::constant({2, 3}, {0.5, 0.25, 0.25, 0.75, 0.25, 0.0});
    EntropyStats s = attention_entropy(record_of({p}));
    const double row1 = 1.5 * std::log(2.0) / std::log(3.0);
    const double row2 = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)) / std::log(3.0);
    CHECK(row2 == doctest::Approx(0.5118595071429147).epsilon(1e-12));
    CHECK(s.rows == 2);
    CHECK(s.single_option_rows == 0);
    CHECK(s.mean_normalized == doctest::Approx(0.5 * (row1 + row2)).epsilon(1e-12));
    CHECK(s.mean_normalized == doctest::Approx(0.7291270687500504).epsilon(1e-12));
  }
  SUBCASE("exact one-hot rows score zero") {
    Tensor head0 = Tensor::constant({2, 2}, {1.0, 0.0, 0.5, 0.5});
    Tensor head1 = Tensor::constant({2, 2}, {1.0, 0.0, 1.0, 0.0});
    EntropyStats s = attention_entropy(record_of({head0, head1}));
    CHECK(s.rows == 4);
    CHECK(s.single_option_rows == 0);
    CHECK(s.mean_normalized == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("width-1 rows have no choice, count as maximal, and are flagged") {
    Tensor p = Tensor::constant({2, 1}, {1.0, 1.0});
    EntropyStats s = attention_entropy(record_of({p}));
    CHECK(s.rows == 2);
    CHECK(s.single_option_rows == 2);
    CHECK(s.mean_normalized == 1.0);
  }
  SUBCASE("peaked rows approach zero without leaving the unit interval") {
    Tensor p = Tensor::constant({1, 3}, {1.0 - 1e-6, 1e-6, 0.0});
    EntropyStats s = attention_entropy(record_of({p}));
    CHECK(s.mean_normalized > 0.0);
    CHECK(s.mean_normalized < 1e-4);
  }
  SUBCASE("an empty record is rejected") {
    AttentionRecord rec;
    CHECK_THROWS_AS(attention_entropy(rec), std::invalid_argument);
  }
}

TEST_CASE("[DERIVED] corpus entropy report aggregates per stack, layer, kind") {
  ToyConfig toy;
  toy.pairs = 3;
  toy.vocab_words = 6;
  toy.min_len = 2;
  toy.max_len = 5;
  toy.seed = 11;
  Corpus corpus = gen_toy_corpus(toy);
  Vocab sv = Vocab::build(corpus, true), tv = Vocab::build(corpus, false);
  auto pairs = encode_corpus(corpus, sv, tv);

  ModelConfig c = tiny_config(sv.size(), tv.size());
  ModelParams params = init_params(c, 5);
  EntropyReport rep = corpus_attention_entropy(params, c, pairs);

  REQUIRE(rep.entries.size() == static_cast<std::size_t>(c.enc_layers + 2 * c.dec_layers));
  CHECK_FALSE(rep.entries[0].decoder_stack);
  CHECK(rep.entries[0].layer == 0);
  CHECK(rep.entries[1].layer == 1);
  CHECK(rep.entries[2].decoder_stack);
  CHECK(rep.entries[2].kind == AttnKind::self_attn);
  CHECK(rep.entries[3].kind == AttnKind::cross_attn);
  CHECK(rep.entries[4].layer == 1);
  CHECK(rep.entries[5].kind == AttnKind::cross_attn);

  // All sequences here have at least two positions, so no attention matrix is
  // a single column and nothing gets flagged.
  for (const auto& e : rep.entries) {
    CHECK(e.stats.mean_normalized >= 0.0);
    CHECK(e.stats.mean_normalized <= 1.0);
    CHECK(e.stats.rows > 0);
    CHECK(e.stats.single_option_rows == 0);
  }

  // Cross-check against per-record stats merged by row count.
  std::vector<double> sums(rep.entries.size(), 0.0);
  std::vector<std::int64_t> rows(rep.entries.size(), 0);
  for (const auto& p : pairs) {
    ForwardResult fr =
        forward(params, c, to_source_ids(p.src), to_decoder_input(p.tgt), RunMode::eval);
    for (const AttentionRecord& rec : fr.records) {
      std::size_t idx = rec.decoder_stack
                            ? static_cast<std::size_t>(c.enc_layers + 2 * rec.layer) +
                                  (rec.kind == AttnKind::cross_attn ? 1 : 0)
                            : static_cast<std::size_t>(rec.layer);
      EntropyStats s = attention_entropy(rec);
      sums[idx] += s.mean_normalized * static_cast<double>(s.rows);
      rows[idx] += s.rows;
    }
  }
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    REQUIRE(rep.entries[i].stats.rows == rows[i]);
    CHECK(rep.entries[i].stats.mean_normalized ==
          doctest::Approx(sums[i] / static_cast<double>(rows[i])).epsilon(1e-12));
  }

  CHECK_THROWS_AS(corpus_attention_entropy(params, c, {}), std::invalid_argument);
}

TEST_CASE("[TRIVIAL] greedy decode mechanics on an untrained model") {
  ModelConfig c = tiny_config(9, 9);
  ModelParams params = init_params(c, 3);
  const std::vector<int> src{4, 6, 5, 8};

  std::vector<int> a = greedy_decode(params, c, src, 12);
  std::vector<int> b = greedy_decode(params, c, src, 12);
  CHECK(a == b);
  CHECK(a.size() <= 12);
  for (int id : a) {
    CHECK(id != kPadId);
    CHECK(id != kBosId);
    CHECK(id != kEosId);
    CHECK(id < 9);
  }

  std::vector<int> capped = greedy_decode(params, c, src, 2);
  CHECK(capped.size() <= 2);
  if (a.size() >= 2) {
    REQUIRE(capped.size() == 2);
    CHECK(capped[0] == a[0]);
    CHECK(capped[1] == a[1]);
  }

  CHECK(greedy_decode(params, c, src, 0).empty());
  CHECK_THROWS_AS(greedy_decode(params, c, src, -1), std::invalid_argument);

  // The model's sequence cap truncates generation instead of throwing.
  ModelConfig short_cfg = c;
  short_cfg.max_seq_len = 3;
  CHECK(greedy_decode(params, short_cfg, {4, 5}, 50).size() <= 2);
}

TEST_CASE("[DERIVED] greedy decode recovers a trained copy task") {
  ToyConfig toy;
  toy.task = ToyTask::copy;
  toy.pairs = 40;
  toy.vocab_words = 6;
  toy.min_len = 2;
  toy.max_len = 5;
  toy.seed = 9;
  Corpus corpus = gen_toy_corpus(toy);
  Vocab sv = Vocab::build(corpus, true), tv = Vocab::build(corpus, false);
  auto pairs = encode_corpus(corpus, sv, tv);

  ModelConfig c = tiny_config(sv.size(), tv.size());
  TrainConfig tc;
  tc.epochs = 150;
  tc.batch_tokens = 64;
  tc.seed = 4;
  tc.optim.base_lr = 1e-2;
  tc.optim.warmup = 20;

  ModelParams untrained = init_params(c, 17);
  ModelParams params = init_params(c, 17);
  AdamState adam = init_adam(params, c);
  TrainResult r = train(params, c, adam, pairs, tc);
  REQUIRE_FALSE(r.diverged);

  const double acc_before = token_accuracy(untrained, c, pairs);
  const double acc_after = token_accuracy(params, c, pairs);
  CHECK(acc_before >= 0.0);
  CHECK(acc_before <= 1.0);
  CHECK(acc_after > acc_before);
  CHECK(acc_after > 0.9);

  std::vector<std::vector<std::string>> refs, hyps;
  std::int64_t exact = 0;
  for (const auto& p : pairs) {
    std::vector<int> out = greedy_decode(params, c, p.src, 16);
    if (out == p.tgt) ++exact;
    refs.push_back(tv.decode(p.tgt));
    hyps.push_back(tv.decode(out));
  }
  CHECK(exact >= static_cast<std::int64_t>(pairs.size() / 2));
  BleuBreakdown b = corpus_bleu(refs, hyps);
  CHECK(b.score > 0.5);
  // eos must fire on its own: no hypothesis ran to the length cap.
  for (const auto& h : hyps) CHECK(h.size() < 16);
}

TEST_CASE("[DERIVED] attention dump serializes tokens and every head matrix") {
  Vocab vocab = Vocab::from_tokens({"<pad>", "<unk>", "<bos>", "<eos>", "w0", "w1", "w2"});
  ModelConfig c = tiny_config(vocab.size(), vocab.size());
  c.enc_layers = 2;
  c.dec_layers = 1;
  ModelParams params = init_params(c, 21);

  const std::vector<std::string> src_words{"w1", "w2", "zzz"};  // zzz is unknown
  const std::vector<std::string> tgt_words{"w0"};
  std::string text = dump_attention_json(params, c, src_words, tgt_words, vocab, vocab);
  nlohmann::json j = nlohmann::json::parse(text);

  CHECK(j["tokens_src"] == std::vector<std::string>{"w1", "w2", "<unk>", "<eos>"});
  CHECK(j["tokens_tgt"] == std::vector<std::string>{"<bos>", "w0"});
  REQUIRE(j["layers"].size() ==
          static_cast<std::size_t>((c.enc_layers + 2 * c.dec_layers) * c.heads));

  // Entries follow the forward record order, heads innermost; matrices match
  // the eval forward bitwise (the dump must not perturb the run).
  ForwardResult fr = forward(params, c, to_source_ids(vocab.encode(src_words)),
                             to_decoder_input(vocab.encode(tgt_words)), RunMode::eval);
  std::size_t k = 0;
  for (const AttentionRecord& rec : fr.records) {
    for (std::size_t h = 0; h < rec.probs.size(); ++h, ++k) {
      const nlohmann::json& entry = j["layers"][k];
      CHECK(entry["stack"] == (rec.decoder_stack ? "decoder" : "encoder"));
      CHECK(entry["layer"] == rec.layer);
      CHECK(entry["kind"] == (rec.kind == AttnKind::cross_attn ? "cross" : "self"));
      CHECK(entry["head"] == h);
      const Shape& s = rec.probs[h].shape();
      const std::vector<double>& v = rec.probs[h].data();
      REQUIRE(entry["probs"].size() == static_cast<std::size_t>(s[0]));
      for (std::int64_t i = 0; i < s[0]; ++i) {
        REQUIRE(entry["probs"][i].size() == static_cast<std::size_t>(s[1]));
        for (std::int64_t jj = 0; jj < s[1]; ++jj) {
          CHECK(entry["probs"][i][jj].get<double>() == v[i * s[1] + jj]);
        }
      }
    }
  }

  // Structural sanity on the matrices themselves: rows are distributions and
  // the decoder self rows respect causality.
  for (const auto& entry : j["layers"]) {
    const bool dec_self = entry["stack"] == "decoder" && entry["kind"] == "self";
    std::size_t i = 0;
    for (const auto& row : entry["probs"]) {
      double sum = 0.0;
      std::size_t nonzero = 0;
      for (const auto& cell : row) {
        double p = cell.get<double>();
        CHECK(p >= 0.0);
        sum += p;
        if (p > 0.0) ++nonzero;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      if (dec_self) CHECK(nonzero <= i + 1);
      ++i;
    }
  }
}
