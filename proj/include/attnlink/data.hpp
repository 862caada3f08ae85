#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnlink/rng.hpp"

// Parallel corpora, whitespace tokenization, frequency vocabularies and the
// synthetic tasks used by the training demos.

namespace attnlink {

struct SentencePair {
  std::vector<std::string> src;
  std::vector<std::string> tgt;
};

using Corpus = std::vector<SentencePair>;

std::vector<std::string> tokenize(const std::string& line);

struct LoadResult {
  Corpus corpus;
  std::int64_t skipped = 0;  // malformed lines (wrong field count or empty side)
};

// One pair per line, source TAB target, tokens separated by spaces.
LoadResult load_corpus_tsv(const std::string& path);
void save_corpus_tsv(const Corpus& corpus, const std::string& path);

class Vocab {
 public:
  // Token ids 0..3 are reserved (pad, unk, bos, eos); corpus tokens follow by
  // descending frequency, ties broken lexicographically. max_size 0 means
  // unlimited; otherwise the total size including reserved ids is capped.
  static Vocab build(const Corpus& corpus, bool source_side, std::int64_t max_size = 0);
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id_of(const std::string& token) const;  // unk id when absent
  const std::string& token_of(int id) const;
  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, int>> index_;  // sorted for lookup
  void rebuild_index();
};

struct EncodedPair {
  std::vector<int> src;  // raw token ids, no specials
  std::vector<int> tgt;
};

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocab& src_vocab,
                                       const Vocab& tgt_vocab);

// Model-facing id sequences.
std::vector<int> to_source_ids(const std::vector<int>& src);     // src + eos
std::vector<int> to_decoder_input(const std::vector<int>& tgt);  // bos + tgt
std::vector<int> to_labels(const std::vector<int>& tgt);         // tgt + eos

enum class ToyTask { copy, reverse, mapped_shuffle };
std::string to_string(ToyTask t);
ToyTask toy_task_from_string(const std::string& s);

struct ToyConfig {
  ToyTask task = ToyTask::copy;
  std::int64_t pairs = 1000;
  std::int64_t vocab_words = 40;  // surface forms w0..w{n-1}
  std::int64_t min_len = 3;
  std::int64_t max_len = 12;
  double swap_prob = 0.5;  // mapped_shuffle: chance of swapping each adjacent pair
  std::uint64_t seed = 1;
};

// copy: target repeats the source. reverse: target is the source reversed.
// mapped_shuffle: each token is sent through a fixed seed-derived bijection
// on the word set, then adjacent positions swap with swap_prob.
Corpus gen_toy_corpus(const ToyConfig& cfg);

// The bijection gen_toy_corpus(mapped_shuffle) applies, as word index -> word
// index. Exposed so tests can predict outputs.
std::vector<std::int64_t> mapped_bijection(std::int64_t vocab_words, std::uint64_t seed);

// Keeps k pairs chosen without replacement, original order preserved.
Corpus subsample(const Corpus& corpus, std::int64_t k, std::uint64_t seed);

}  // namespace attnlink
