#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnlink/data.hpp"
#include "attnlink/model.hpp"

// Greedy decoding, corpus BLEU, teacher-forced accuracy and attention
// diagnostics (normalized entropies, JSON dumps).

namespace attnlink {

// Feeds back the argmax token by token, starting from bos, until eos or
// max_len tokens. pad and bos are never proposed; exact ties go to the
// smallest id. src_ids are raw token ids (eos is appended internally); the
// returned ids are raw target ids without bos/eos.
std::vector<int> greedy_decode(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<int>& src_ids, std::int64_t max_len);

struct BleuBreakdown {
  double score = 0.0;  // 0..1
  double precisions[4] = {0.0, 0.0, 0.0, 0.0};
  double brevity_penalty = 0.0;
  std::int64_t hyp_len = 0;
  std::int64_t ref_len = 0;
};

// Corpus-level BLEU-4: clipped modified n-gram precisions pooled over all
// sentences, geometric mean, brevity penalty exp(1 - r/c) when c < r. Any
// zero precision (or an empty hypothesis corpus) zeroes the score; no
// smoothing is applied.
BleuBreakdown corpus_bleu(const std::vector<std::vector<std::string>>& refs,
                          const std::vector<std::vector<std::string>>& hyps);

// Teacher-forced micro-averaged accuracy of argmax predictions against the
// shifted targets.
double token_accuracy(const ModelParams& params, const ModelConfig& cfg,
                      const std::vector<EncodedPair>& pairs);

struct EntropyStats {
  double mean_normalized = 0.0;         // over all rows
  std::int64_t rows = 0;                // rows contributing to the mean
  std::int64_t single_option_rows = 0;  // width-1 rows, each contributing 1
};

// Row entropies of the attention distributions, normalized by ln(row width) so
// every row lands in [0, 1]. A width-1 row has no choice to measure; it counts
// as maximally unconcentrated (1) and is flagged separately.
EntropyStats attention_entropy(const AttentionRecord& rec);

struct EntropyReport {
  struct Entry {
    bool decoder_stack = false;
    AttnKind kind = AttnKind::self_attn;
    std::int64_t layer = 0;
    EntropyStats stats;
  };
  std::vector<Entry> entries;  // encoder layers first, then decoder self/cross pairs
};

// Accumulates attention_entropy over eval-mode forwards of the whole corpus,
// one entry per (stack, layer, kind).
EntropyReport corpus_attention_entropy(const ModelParams& params, const ModelConfig& cfg,
                                       const std::vector<EncodedPair>& pairs);

// Runs one eval forward and serializes every head's attention matrix:
// {"tokens_src": [...], "tokens_tgt": [...], "layers": [{"stack", "layer",
// "kind", "head", "probs": row-per-query}]}. Unknown words map to <unk>.
std::string dump_attention_json(const ModelParams& params, const ModelConfig& cfg,
                                const std::vector<std::string>& src_tokens,
                                const std::vector<std::string>& tgt_tokens,
                                const Vocab& src_vocab, const Vocab& tgt_vocab);

}  // namespace attnlink
