#pragma once

#include <vector>

#include "attnlink/tensor.hpp"

// Multi-head attention with an optional logit link: the previous layer's
// pre-softmax attention logits (per head) are scaled by lambda and added to
// the current layer's logits before masking and softmax. Activations are
// stored feature-major, one column per position. Attention matrices are kept
// query-major: row i holds the distribution query i puts over keys.

namespace attnlink {

struct AttentionParams {
  std::vector<Tensor> wq;  // per head: [d_q/h x d]
  std::vector<Tensor> wk;  // per head: [d_k/h x d]
  std::vector<Tensor> wv;  // per head: [d_v/h x d]
  std::vector<Tensor> wo;  // per head: [d x d_v/h]
};

// Cross attention queries the encoder's shared key/value projections, so a
// decoder layer owns only the query and output maps.
struct CrossAttnParams {
  std::vector<Tensor> wq;  // per head: [d_q/h x d]
  std::vector<Tensor> wo;  // per head: [d x d_v/h]
};

struct FFNParams {
  Tensor w1;  // [d_hidden x d]
  Tensor b1;  // [d_hidden]
  Tensor w2;  // [d x d_hidden]
  Tensor b2;  // [d]
};

enum class AttnKind { self_attn, cross_attn };
enum class LinkSource { cached, reprojected };

struct AttentionRecord {
  int layer = 0;
  AttnKind kind = AttnKind::self_attn;
  bool decoder_stack = false;
  // Per head. logits are this layer's own scores (post scaling, pre mask,
  // never including the link term); probs are the final post-softmax rows.
  std::vector<Tensor> logits;
  std::vector<Tensor> probs;
};

struct AttnResult {
  Tensor y;
  AttentionRecord record;
};

// Raw per-head scores between two position sets, keys in rows:
// (W_K x_k)^T (W_Q x_q), times 1/sqrt(key dim) when scale is set.
Tensor head_logits(const Tensor& x_q, const Tensor& x_k, const Tensor& wq, const Tensor& wk,
                   bool scale);

// Lower-triangular keep mask (position i may attend to j <= i).
Tensor causal_keep_mask(std::int64_t n);

// Self attention over x [d x n]. prev is the previous layer's self record
// when the link is active (null on the first layer or when disabled).
// prev_params supplies the previous layer's projections for the reprojected
// link source. A causal mask, when given, is applied after the link term is
// added.
AttnResult linked_self_attention(const Tensor& x, const AttentionParams& params,
                                 const AttentionRecord* prev, const AttentionParams* prev_params,
                                 LinkSource source, double lambda, bool causal, bool scale,
                                 int layer, bool decoder_stack);

// Cross attention for decoder positions x [d x n_tgt] against the encoder's
// per-head key/value tensors (enc_k[h]: [d_k/h x n_src], enc_v[h]:
// [d_v/h x n_src]).
AttnResult linked_cross_attention(const Tensor& x, const std::vector<Tensor>& enc_k,
                                  const std::vector<Tensor>& enc_v, const CrossAttnParams& params,
                                  const AttentionRecord* prev, const CrossAttnParams* prev_params,
                                  LinkSource source, double lambda, bool scale, int layer);

// Position-wise feed-forward W2 relu(W1 x + b1) + b2. The optional mask
// multiplies the hidden activation (used for dropout during training).
Tensor ffn(const Tensor& x, const FFNParams& params, const Tensor& hidden_mask = Tensor());

}  // namespace attnlink
