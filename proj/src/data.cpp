#include "attnlink/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "attnlink/vocab_ids.hpp"

namespace attnlink {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

LoadResult load_corpus_tsv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open corpus file: " + path);
  LoadResult out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      ++out.skipped;
      continue;
    }
    SentencePair pair;
    pair.src = tokenize(line.substr(0, tab));
    pair.tgt = tokenize(line.substr(tab + 1));
    if (pair.src.empty() || pair.tgt.empty()) {
      ++out.skipped;
      continue;
    }
    out.corpus.push_back(std::move(pair));
  }
  return out;
}

void save_corpus_tsv(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open corpus file for writing: " + path);
  for (const SentencePair& p : corpus) {
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      if (i) os << ' ';
      os << p.src[i];
    }
    os << '\t';
    for (std::size_t i = 0; i < p.tgt.size(); ++i) {
      if (i) os << ' ';
      os << p.tgt[i];
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing corpus file: " + path);
}

Vocab Vocab::build(const Corpus& corpus, bool source_side, std::int64_t max_size) {
  std::map<std::string, std::int64_t> freq;
  for (const SentencePair& p : corpus)
    for (const std::string& t : (source_side ? p.src : p.tgt)) ++freq[t];

  std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens{"<pad>", "<unk>", "<bos>", "<eos>"};
  for (const auto& [tok, n] : ranked) {
    if (max_size > 0 && static_cast<std::int64_t>(tokens.size()) >= max_size) break;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(kReservedIds))
    throw std::invalid_argument("vocab needs at least the " +
                                std::to_string(kReservedIds) + " reserved tokens");
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.rebuild_index();
  return v;
}

void Vocab::rebuild_index() {
  index_.clear();
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    index_.emplace_back(tokens_[i], static_cast<int>(i));
  std::sort(index_.begin(), index_.end());
  for (std::size_t i = 1; i < index_.size(); ++i)
    if (index_[i].first == index_[i - 1].first)
      throw std::invalid_argument("duplicate vocab token \"" + index_[i].first + "\"");
}

int Vocab::id_of(const std::string& token) const {
  auto it = std::lower_bound(index_.begin(), index_.end(), token,
                             [](const auto& a, const std::string& b) { return a.first < b; });
  if (it != index_.end() && it->first == token) return it->second;
  return kUnkId;
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("token id " + std::to_string(id) +
                                " outside vocab of size " + std::to_string(size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const std::string& w : words) ids.push_back(id_of(w));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (int id : ids) words.push_back(token_of(id));
  return words;
}

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocab& src_vocab,
                                       const Vocab& tgt_vocab) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (const SentencePair& p : corpus)
    out.push_back({src_vocab.encode(p.src), tgt_vocab.encode(p.tgt)});
  return out;
}

std::vector<int> to_source_ids(const std::vector<int>& src) {
  std::vector<int> ids = src;
  ids.push_back(kEosId);
  return ids;
}

std::vector<int> to_decoder_input(const std::vector<int>& tgt) {
  std::vector<int> ids{kBosId};
  ids.insert(ids.end(), tgt.begin(), tgt.end());
  return ids;
}

std::vector<int> to_labels(const std::vector<int>& tgt) {
  std::vector<int> ids = tgt;
  ids.push_back(kEosId);
  return ids;
}

std::string to_string(ToyTask t) {
  switch (t) {
    case ToyTask::copy: return "copy";
    case ToyTask::reverse: return "reverse";
    case ToyTask::mapped_shuffle: return "mapped_shuffle";
  }
  throw std::invalid_argument("unknown ToyTask value");
}

ToyTask toy_task_from_string(const std::string& s) {
  if (s == "copy") return ToyTask::copy;
  if (s == "reverse") return ToyTask::reverse;
  if (s == "mapped_shuffle") return ToyTask::mapped_shuffle;
  throw std::invalid_argument("unknown toy task \"" + s +
                              "\" (expected copy|reverse|mapped_shuffle)");
}

std::vector<std::int64_t> mapped_bijection(std::int64_t vocab_words, std::uint64_t seed) {
  if (vocab_words < 1) throw std::invalid_argument("mapped_bijection needs vocab_words >= 1");
  std::vector<std::int64_t> pi(static_cast<std::size_t>(vocab_words));
  for (std::int64_t i = 0; i < vocab_words; ++i) pi[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, 1));
  rng.shuffle(pi);
  return pi;
}

Corpus gen_toy_corpus(const ToyConfig& cfg) {
  if (cfg.pairs < 1 || cfg.vocab_words < 2)
    throw std::invalid_argument("toy corpus needs pairs >= 1 and vocab_words >= 2");
  if (cfg.min_len < 1 || cfg.max_len < cfg.min_len)
    throw std::invalid_argument("toy corpus needs 1 <= min_len <= max_len");
  if (!(cfg.swap_prob >= 0.0 && cfg.swap_prob <= 1.0))
    throw std::invalid_argument("swap_prob must lie in [0, 1]");

  std::vector<std::string> words;
  words.reserve(static_cast<std::size_t>(cfg.vocab_words));
  for (std::int64_t i = 0; i < cfg.vocab_words; ++i)
    words.push_back("w" + std::to_string(i));

  Rng text_rng(derive_seed(cfg.seed, 0));
  Rng swap_rng(derive_seed(cfg.seed, 2));
  const std::vector<std::int64_t> pi =
      cfg.task == ToyTask::mapped_shuffle
          ? mapped_bijection(cfg.vocab_words, cfg.seed)
          : std::vector<std::int64_t>();

  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.pairs));
  for (std::int64_t p = 0; p < cfg.pairs; ++p) {
    const std::int64_t len = cfg.min_len + text_rng.uniform_int(cfg.max_len - cfg.min_len + 1);
    std::vector<std::int64_t> src_idx(static_cast<std::size_t>(len));
    for (auto& w : src_idx) w = text_rng.uniform_int(cfg.vocab_words);

    SentencePair pair;
    for (std::int64_t w : src_idx) pair.src.push_back(words[static_cast<std::size_t>(w)]);
    switch (cfg.task) {
      case ToyTask::copy:
        pair.tgt = pair.src;
        break;
      case ToyTask::reverse:
        pair.tgt.assign(pair.src.rbegin(), pair.src.rend());
        break;
      case ToyTask::mapped_shuffle: {
        std::vector<std::int64_t> tgt_idx;
        tgt_idx.reserve(src_idx.size());
        for (std::int64_t w : src_idx) tgt_idx.push_back(pi[static_cast<std::size_t>(w)]);
        for (std::size_t i = 0; i + 1 < tgt_idx.size(); i += 2)
          if (swap_rng.uniform() < cfg.swap_prob) std::swap(tgt_idx[i], tgt_idx[i + 1]);
        for (std::int64_t w : tgt_idx) pair.tgt.push_back(words[static_cast<std::size_t>(w)]);
        break;
      }
    }
    corpus.push_back(std::move(pair));
  }
  return corpus;
}

Corpus subsample(const Corpus& corpus, std::int64_t k, std::uint64_t seed) {
  if (k < 0) throw std::invalid_argument("subsample needs k >= 0");
  if (k >= static_cast<std::int64_t>(corpus.size())) return corpus;
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  Corpus out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(corpus[i]);
  return out;
}

}  // namespace attnlink
