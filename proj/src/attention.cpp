#include "attnlink/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace attnlink {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void check_projection(const Tensor& w, std::int64_t d, const char* who) {
  check(w.defined() && w.shape().size() == 2,
        std::string(who) + ": projection must be a matrix");
  check(w.shape()[1] == d, std::string(who) + ": projection " + shape_str(w.shape()) +
                               " does not act on feature dim " + std::to_string(d));
}

double logit_scale(const Tensor& wk, bool scale) {
  return scale ? 1.0 / std::sqrt(static_cast<double>(wk.shape()[0])) : 1.0;
}

// query-major scores (W_Q x_q)^T (W_K x_k): [n_q x n_k]
Tensor scores_qmajor(const Tensor& x_q, const Tensor& x_k, const Tensor& wq, const Tensor& wk,
                     bool scale) {
  check(wq.shape()[0] == wk.shape()[0],
        "attention: query dim " + shape_str(wq.shape()) + " and key dim " + shape_str(wk.shape()) +
            " disagree per head");
  Tensor q = matmul(wq, x_q);
  Tensor k = matmul(wk, x_k);
  Tensor s = matmul(transpose(q), k);
  const double f = logit_scale(wk, scale);
  return f == 1.0 ? s : attnlink::scale(s, f);
}

void check_lambda(double lambda) {
  check(std::isfinite(lambda), "attention: link weight lambda must be finite");
}

void check_prev(const AttentionRecord* prev, AttnKind kind, std::size_t heads, const Shape& want) {
  if (prev == nullptr) return;
  check(prev->kind == kind, "attention: linked record has the wrong kind");
  check(prev->logits.size() == heads,
        "attention: linked record has " + std::to_string(prev->logits.size()) + " heads, expected " +
            std::to_string(heads));
  for (const auto& l : prev->logits)
    check(l.defined() && l.shape() == want,
          "attention: linked logits " + shape_str(l.shape()) + " do not match " + shape_str(want));
}

}  // namespace

Tensor head_logits(const Tensor& x_q, const Tensor& x_k, const Tensor& wq, const Tensor& wk,
                   bool scale) {
  check(x_q.defined() && x_q.shape().size() == 2, "head_logits: x_q must be a matrix");
  check(x_k.defined() && x_k.shape().size() == 2, "head_logits: x_k must be a matrix");
  check_projection(wq, x_q.shape()[0], "head_logits");
  check_projection(wk, x_k.shape()[0], "head_logits");
  check(wq.shape()[0] == wk.shape()[0],
        "head_logits: query dim " + shape_str(wq.shape()) + " and key dim " +
            shape_str(wk.shape()) + " disagree");
  Tensor q = matmul(wq, x_q);
  Tensor k = matmul(wk, x_k);
  Tensor s = matmul(transpose(k), q);
  const double f = logit_scale(wk, scale);
  return f == 1.0 ? s : attnlink::scale(s, f);
}

Tensor causal_keep_mask(std::int64_t n) {
  check(n > 0, "causal_keep_mask: size must be positive");
  std::vector<double> keep(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j <= i; ++j) keep[i * n + j] = 1.0;
  return Tensor::constant({n, n}, std::move(keep));
}

AttnResult linked_self_attention(const Tensor& x, const AttentionParams& params,
                                 const AttentionRecord* prev, const AttentionParams* prev_params,
                                 LinkSource source, double lambda, bool causal, bool scale,
                                 int layer, bool decoder_stack) {
  check(x.defined() && x.shape().size() == 2, "self_attention: x must be a matrix");
  const std::int64_t d = x.shape()[0];
  const std::int64_t n = x.shape()[1];
  const std::size_t heads = params.wq.size();
  check(heads >= 1 && params.wk.size() == heads && params.wv.size() == heads &&
            params.wo.size() == heads,
        "self_attention: per-head parameter lists disagree");
  check_lambda(lambda);
  check_prev(prev, AttnKind::self_attn, heads, Shape{n, n});
  check(!(prev != nullptr && source == LinkSource::reprojected && prev_params == nullptr),
        "self_attention: reprojected link needs the previous layer's projections");

  Tensor mask;
  if (causal) mask = causal_keep_mask(n);

  AttentionRecord rec;
  rec.layer = layer;
  rec.kind = AttnKind::self_attn;
  rec.decoder_stack = decoder_stack;
  rec.logits.reserve(heads);
  rec.probs.reserve(heads);

  Tensor y;
  for (std::size_t h = 0; h < heads; ++h) {
    check_projection(params.wq[h], d, "self_attention");
    check_projection(params.wk[h], d, "self_attention");
    check_projection(params.wv[h], d, "self_attention");
    Tensor own = scores_qmajor(x, x, params.wq[h], params.wk[h], scale);
    Tensor total = own;
    if (prev != nullptr) {
      Tensor link;
      if (source == LinkSource::cached) {
        link = prev->logits[h];
      } else {
        link = scores_qmajor(x, x, prev_params->wq[h], prev_params->wk[h], scale);
      }
      total = add_scaled(own, link, lambda);
    }
    Tensor p = softmax_rows(total, mask);
    Tensor v = matmul(params.wv[h], x);
    Tensor yh = matmul(params.wo[h], matmul(v, transpose(p)));
    y = y.defined() ? add(y, yh) : yh;
    rec.logits.push_back(own);
    rec.probs.push_back(p);
  }
  return {y, std::move(rec)};
}

AttnResult linked_cross_attention(const Tensor& x, const std::vector<Tensor>& enc_k,
                                  const std::vector<Tensor>& enc_v, const CrossAttnParams& params,
                                  const AttentionRecord* prev, const CrossAttnParams* prev_params,
                                  LinkSource source, double lambda, bool scale, int layer) {
  check(x.defined() && x.shape().size() == 2, "cross_attention: x must be a matrix");
  const std::int64_t d = x.shape()[0];
  const std::int64_t n_tgt = x.shape()[1];
  const std::size_t heads = params.wq.size();
  check(heads >= 1 && params.wo.size() == heads, "cross_attention: per-head parameter lists disagree");
  check(enc_k.size() == heads && enc_v.size() == heads,
        "cross_attention: encoder key/value head count disagrees with parameters");
  check_lambda(lambda);
  check(enc_k[0].defined() && enc_k[0].shape().size() == 2, "cross_attention: bad encoder keys");
  const std::int64_t n_src = enc_k[0].shape()[1];
  check_prev(prev, AttnKind::cross_attn, heads, Shape{n_tgt, n_src});
  check(!(prev != nullptr && source == LinkSource::reprojected && prev_params == nullptr),
        "cross_attention: reprojected link needs the previous layer's projections");

  AttentionRecord rec;
  rec.layer = layer;
  rec.kind = AttnKind::cross_attn;
  rec.decoder_stack = true;
  rec.logits.reserve(heads);
  rec.probs.reserve(heads);

  Tensor y;
  for (std::size_t h = 0; h < heads; ++h) {
    check_projection(params.wq[h], d, "cross_attention");
    check(enc_k[h].defined() && enc_k[h].shape().size() == 2 &&
              enc_k[h].shape()[0] == params.wq[h].shape()[0] && enc_k[h].shape()[1] == n_src,
          "cross_attention: encoder keys " + shape_str(enc_k[h].shape()) +
              " do not match query projection " + shape_str(params.wq[h].shape()));
    check(enc_v[h].defined() && enc_v[h].shape().size() == 2 && enc_v[h].shape()[1] == n_src,
          "cross_attention: bad encoder values for head " + std::to_string(h));

    auto cross_scores = [&](const Tensor& wq) {
      Tensor q = matmul(wq, x);
      Tensor s = matmul(transpose(q), enc_k[h]);
      const double f = scale ? 1.0 / std::sqrt(static_cast<double>(enc_k[h].shape()[0])) : 1.0;
      return f == 1.0 ? s : attnlink::scale(s, f);
    };
    Tensor own = cross_scores(params.wq[h]);
    Tensor total = own;
    if (prev != nullptr) {
      Tensor link = source == LinkSource::cached ? prev->logits[h]
                                                 : cross_scores(prev_params->wq[h]);
      total = add_scaled(own, link, lambda);
    }
    Tensor p = softmax_rows(total);
    Tensor yh = matmul(params.wo[h], matmul(enc_v[h], transpose(p)));
    y = y.defined() ? add(y, yh) : yh;
    rec.logits.push_back(own);
    rec.probs.push_back(p);
  }
  return {y, std::move(rec)};
}

Tensor ffn(const Tensor& x, const FFNParams& params, const Tensor& hidden_mask) {
  check(x.defined() && x.shape().size() == 2, "ffn: x must be a matrix");
  const std::int64_t d = x.shape()[0];
  check_projection(params.w1, d, "ffn");
  const std::int64_t dh = params.w1.shape()[0];
  check(params.b1.defined() && params.b1.shape() == Shape{dh},
        "ffn: b1 must have shape [" + std::to_string(dh) + "]");
  check(params.w2.defined() && params.w2.shape() == Shape{d, dh},
        "ffn: w2 " + shape_str(params.w2.shape()) + " must map hidden back to features");
  check(params.b2.defined() && params.b2.shape() == Shape{d},
        "ffn: b2 must have shape [" + std::to_string(d) + "]");
  Tensor h = relu(add_col_bias(matmul(params.w1, x), params.b1));
  if (hidden_mask.defined()) h = mul(h, hidden_mask);
  return add_col_bias(matmul(params.w2, h), params.b2);
}

}  // namespace attnlink
