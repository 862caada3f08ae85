#include "attnlink/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "attnlink/vocab_ids.hpp"

namespace attnlink {

namespace {

// Plain argmax over one column of [rows x cols] row-major data; ties go to
// the smallest row index.
int argmax_col(const std::vector<double>& v, std::int64_t rows, std::int64_t cols,
               std::int64_t col) {
  int best = 0;
  double bv = v[static_cast<std::size_t>(col)];
  for (std::int64_t i = 1; i < rows; ++i) {
    double val = v[static_cast<std::size_t>(i * cols + col)];
    if (val > bv) {
      best = static_cast<int>(i);
      bv = val;
    }
  }
  return best;
}

void count_ngrams(const std::vector<std::string>& words, int n,
                  std::unordered_map<std::string, std::int64_t>& out) {
  const std::int64_t total = static_cast<std::int64_t>(words.size()) - n + 1;
  for (std::int64_t i = 0; i < total; ++i) {
    std::string key = words[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += words[i + j];
    }
    ++out[key];
  }
}

// Adds one record's row entropies into running sums. Each row contributes
// H / ln(width); a width-1 row has no choice to measure, so it contributes the
// maximal 1 and is tallied separately.
void accumulate_entropy(const AttentionRecord& rec, double& sum_norm, std::int64_t& rows,
                        std::int64_t& single) {
  for (const Tensor& probs : rec.probs) {
    const Shape& s = probs.shape();
    const std::vector<double>& v = probs.data();
    const std::int64_t n_q = s[0], n_k = s[1];
    for (std::int64_t i = 0; i < n_q; ++i) {
      ++rows;
      if (n_k == 1) {
        ++single;
        sum_norm += 1.0;
        continue;
      }
      double h = 0.0;
      for (std::int64_t j = 0; j < n_k; ++j) {
        double p = v[static_cast<std::size_t>(i * n_k + j)];
        if (p > 0.0) h -= p * std::log(p);
      }
      sum_norm += std::clamp(h / std::log(static_cast<double>(n_k)), 0.0, 1.0);
    }
  }
}

EntropyStats finish_entropy(double sum_norm, std::int64_t rows, std::int64_t single) {
  EntropyStats stats;
  stats.rows = rows;
  stats.single_option_rows = single;
  stats.mean_normalized = rows > 0 ? sum_norm / static_cast<double>(rows) : 1.0;
  return stats;
}

}  // namespace

std::vector<int> greedy_decode(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<int>& src_ids, std::int64_t max_len) {
  if (max_len < 0) throw std::invalid_argument("greedy_decode: max_len must be nonnegative");
  EncodeResult enc = encode(params, cfg, to_source_ids(src_ids), RunMode::eval);
  std::vector<int> out;
  std::vector<int> tgt_in{kBosId};
  // The decoder input holds bos plus everything emitted so far, so the model's
  // sequence limit also caps the output.
  const std::int64_t cap = std::min(max_len, cfg.max_seq_len - 1);
  while (static_cast<std::int64_t>(out.size()) < cap) {
    DecodeResult dec = decode_stack(params, cfg, enc, tgt_in, RunMode::eval);
    const std::int64_t n = static_cast<std::int64_t>(tgt_in.size());
    const std::vector<double>& v = dec.logits.data();
    int best = -1;
    double bv = 0.0;
    for (std::int64_t i = 0; i < cfg.tgt_vocab; ++i) {
      if (i == kPadId || i == kBosId) continue;
      double val = v[static_cast<std::size_t>(i * n + (n - 1))];
      if (best < 0 || val > bv) {
        best = static_cast<int>(i);
        bv = val;
      }
    }
    if (best == kEosId) break;
    out.push_back(best);
    tgt_in.push_back(best);
  }
  return out;
}

BleuBreakdown corpus_bleu(const std::vector<std::vector<std::string>>& refs,
                          const std::vector<std::vector<std::string>>& hyps) {
  if (refs.size() != hyps.size())
    throw std::invalid_argument("corpus_bleu: reference and hypothesis counts differ");
  if (refs.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");

  std::int64_t match[4] = {0, 0, 0, 0};
  std::int64_t total[4] = {0, 0, 0, 0};
  BleuBreakdown b;
  for (std::size_t s = 0; s < refs.size(); ++s) {
    if (refs[s].empty())
      throw std::invalid_argument("corpus_bleu: reference " + std::to_string(s) + " is empty");
    b.ref_len += static_cast<std::int64_t>(refs[s].size());
    b.hyp_len += static_cast<std::int64_t>(hyps[s].size());
    for (int n = 1; n <= 4; ++n) {
      std::unordered_map<std::string, std::int64_t> ref_counts, hyp_counts;
      count_ngrams(refs[s], n, ref_counts);
      count_ngrams(hyps[s], n, hyp_counts);
      for (const auto& [key, count] : hyp_counts) {
        total[n - 1] += count;
        auto it = ref_counts.find(key);
        if (it != ref_counts.end()) match[n - 1] += std::min(count, it->second);
      }
    }
  }

  double log_sum = 0.0;
  bool any_zero = false;
  for (int n = 0; n < 4; ++n) {
    b.precisions[n] =
        total[n] > 0 ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : 0.0;
    if (b.precisions[n] > 0.0)
      log_sum += std::log(b.precisions[n]);
    else
      any_zero = true;
  }
  b.brevity_penalty =
      b.hyp_len == 0
          ? 0.0
          : (b.hyp_len >= b.ref_len
                 ? 1.0
                 : std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len)));
  b.score = any_zero ? 0.0 : b.brevity_penalty * std::exp(log_sum / 4.0);
  return b;
}

double token_accuracy(const ModelParams& params, const ModelConfig& cfg,
                      const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("token_accuracy: empty corpus");
  std::int64_t correct = 0, total = 0;
  for (const EncodedPair& p : pairs) {
    ForwardResult fr = forward(params, cfg, to_source_ids(p.src), to_decoder_input(p.tgt),
                               RunMode::eval);
    const std::vector<int> labels = to_labels(p.tgt);
    const std::int64_t n = static_cast<std::int64_t>(labels.size());
    const std::vector<double>& v = fr.logits.data();
    for (std::int64_t j = 0; j < n; ++j) {
      if (argmax_col(v, cfg.tgt_vocab, n, j) == labels[j]) ++correct;
    }
    total += n;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

EntropyStats attention_entropy(const AttentionRecord& rec) {
  if (rec.probs.empty())
    throw std::invalid_argument("attention_entropy: record has no probability matrices");
  double sum_norm = 0.0;
  std::int64_t rows = 0, single = 0;
  accumulate_entropy(rec, sum_norm, rows, single);
  return finish_entropy(sum_norm, rows, single);
}

EntropyReport corpus_attention_entropy(const ModelParams& params, const ModelConfig& cfg,
                                       const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_attention_entropy: empty corpus");
  const std::size_t n_entries =
      static_cast<std::size_t>(cfg.enc_layers) + 2 * static_cast<std::size_t>(cfg.dec_layers);
  std::vector<double> sums(n_entries, 0.0);
  std::vector<std::int64_t> rows(n_entries, 0), singles(n_entries, 0);
  for (const EncodedPair& p : pairs) {
    ForwardResult fr = forward(params, cfg, to_source_ids(p.src), to_decoder_input(p.tgt),
                               RunMode::eval);
    for (const AttentionRecord& rec : fr.records) {
      std::size_t idx =
          rec.decoder_stack
              ? static_cast<std::size_t>(cfg.enc_layers) + 2 * static_cast<std::size_t>(rec.layer) +
                    (rec.kind == AttnKind::cross_attn ? 1 : 0)
              : static_cast<std::size_t>(rec.layer);
      accumulate_entropy(rec, sums[idx], rows[idx], singles[idx]);
    }
  }
  EntropyReport report;
  report.entries.reserve(n_entries);
  for (std::int64_t l = 0; l < cfg.enc_layers; ++l)
    report.entries.push_back({false, AttnKind::self_attn, l, {}});
  for (std::int64_t l = 0; l < cfg.dec_layers; ++l) {
    report.entries.push_back({true, AttnKind::self_attn, l, {}});
    report.entries.push_back({true, AttnKind::cross_attn, l, {}});
  }
  for (std::size_t i = 0; i < n_entries; ++i)
    report.entries[i].stats = finish_entropy(sums[i], rows[i], singles[i]);
  return report;
}

std::string dump_attention_json(const ModelParams& params, const ModelConfig& cfg,
                                const std::vector<std::string>& src_tokens,
                                const std::vector<std::string>& tgt_tokens,
                                const Vocab& src_vocab, const Vocab& tgt_vocab) {
  const std::vector<int> src_in = to_source_ids(src_vocab.encode(src_tokens));
  const std::vector<int> tgt_in = to_decoder_input(tgt_vocab.encode(tgt_tokens));
  ForwardResult fr = forward(params, cfg, src_in, tgt_in, RunMode::eval);

  nlohmann::json j;
  j["tokens_src"] = src_vocab.decode(src_in);
  j["tokens_tgt"] = tgt_vocab.decode(tgt_in);
  nlohmann::json layers = nlohmann::json::array();
  for (const AttentionRecord& rec : fr.records) {
    for (std::size_t h = 0; h < rec.probs.size(); ++h) {
      const Shape& s = rec.probs[h].shape();
      const std::vector<double>& v = rec.probs[h].data();
      nlohmann::json probs = nlohmann::json::array();
      for (std::int64_t i = 0; i < s[0]; ++i) {
        probs.push_back(std::vector<double>(v.begin() + i * s[1], v.begin() + (i + 1) * s[1]));
      }
      layers.push_back({{"stack", rec.decoder_stack ? "decoder" : "encoder"},
                        {"layer", rec.layer},
                        {"kind", rec.kind == AttnKind::cross_attn ? "cross" : "self"},
                        {"head", h},
                        {"probs", std::move(probs)}});
    }
  }
  j["layers"] = std::move(layers);
  return j.dump(2);
}

}  // namespace attnlink
