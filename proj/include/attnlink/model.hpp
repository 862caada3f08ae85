#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnlink/attention.hpp"
#include "attnlink/rng.hpp"
#include "attnlink/tensor.hpp"

// Encoder/decoder transformer with optional attention links. Post-norm
// residual blocks, sinusoidal positions, embeddings scaled by sqrt(d).
// Cross attention reads one set of key/value projections computed from the
// final encoder state and shared by every decoder layer.

namespace attnlink {

enum class LinkPlacement { none, encoder, decoder, both };
enum class RunMode { train, eval };

std::string to_string(LinkPlacement p);
std::string to_string(LinkSource s);
LinkPlacement placement_from_string(const std::string& s);
LinkSource link_source_from_string(const std::string& s);

struct ModelConfig {
  std::int64_t d = 512;
  std::int64_t d_q = 128;
  std::int64_t d_k = 128;
  std::int64_t d_v = 128;
  std::int64_t d_hidden = 1024;
  std::int64_t heads = 4;
  std::int64_t enc_layers = 6;
  std::int64_t dec_layers = 6;
  LinkPlacement placement = LinkPlacement::both;
  double link_lambda = 1.0;
  LinkSource link_source = LinkSource::cached;
  double dropout = 0.1;
  std::int64_t src_vocab = 0;  // filled from data before use
  std::int64_t tgt_vocab = 0;
  std::int64_t max_seq_len = 256;
  bool scale_logits = true;
  // Diagnostic switch: linked layers receive all-zero previous logits instead
  // of the real ones. Exercises the additive identity without rewiring.
  bool zero_link_logits = false;

  bool link_encoder() const {
    return placement == LinkPlacement::encoder || placement == LinkPlacement::both;
  }
  bool link_decoder() const {
    return placement == LinkPlacement::decoder || placement == LinkPlacement::both;
  }
  // Throws std::invalid_argument naming every offending field.
  void validate() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct EncoderLayer {
  AttentionParams self_attn;
  LayerNormParams ln_self;
  FFNParams ffn;
  LayerNormParams ln_ffn;
};

struct DecoderLayer {
  AttentionParams self_attn;
  LayerNormParams ln_self;
  CrossAttnParams cross_attn;
  LayerNormParams ln_cross;
  FFNParams ffn;
  LayerNormParams ln_ffn;
};

struct MemoryProj {
  std::vector<Tensor> wk;  // per head: [d_k/h x d]
  std::vector<Tensor> wv;  // per head: [d_v/h x d]
};

struct ModelParams {
  Tensor src_embedding;  // [d x src_vocab]
  Tensor tgt_embedding;  // [d x tgt_vocab]
  std::vector<EncoderLayer> encoder;
  MemoryProj memory;
  std::vector<DecoderLayer> decoder;
  Tensor out_w;  // [tgt_vocab x d]
  Tensor out_b;  // [tgt_vocab]
};

enum class ParamKind { weight, bias, gain };

// Visits every parameter slot in the canonical order used for
// initialization, optimizer state and checkpoints. Sizes any empty layer or
// head vectors from the config, so it also lays out fresh ModelParams.
void visit_params(ModelParams& p, const ModelConfig& cfg,
                  const std::function<void(const std::string&, const Shape&, ParamKind, Tensor&)>& fn);
void visit_params(const ModelParams& p, const ModelConfig& cfg,
                  const std::function<void(const std::string&, const Tensor&)>& fn);
std::int64_t parameter_count(const ModelParams& p, const ModelConfig& cfg);

// Xavier-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases, unit
// normalization gains. Identical seeds give identical parameters.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// [d x n] constant; feature 2i is sin(pos/10000^(2i/d)), feature 2i+1 the
// matching cos, so position 0 reads [0, 1, 0, 1, ...].
Tensor positional_encoding(std::int64_t d, std::int64_t n);

struct EncodeResult {
  Tensor memory;               // [d x n_src]
  std::vector<Tensor> keys;    // per head: [d_k/h x n_src]
  std::vector<Tensor> values;  // per head: [d_v/h x n_src]
  std::vector<AttentionRecord> records;
};

struct DecodeResult {
  Tensor logits;  // [tgt_vocab x n_tgt]
  std::vector<AttentionRecord> records;  // per layer: self then cross
};

struct ForwardResult {
  Tensor logits;
  std::vector<AttentionRecord> records;  // encoder records then decoder records
};

EncodeResult encode(const ModelParams& params, const ModelConfig& cfg,
                    const std::vector<int>& src_ids, RunMode mode,
                    Rng* dropout_rng = nullptr);

// Runs the decoder against fixed encoder output.
DecodeResult decode_stack(const ModelParams& params, const ModelConfig& cfg,
                          const EncodeResult& enc, const std::vector<int>& tgt_in_ids,
                          RunMode mode, Rng* dropout_rng = nullptr);

ForwardResult forward(const ModelParams& params, const ModelConfig& cfg,
                      const std::vector<int>& src_ids, const std::vector<int>& tgt_in_ids,
                      RunMode mode, Rng* dropout_rng = nullptr);

// Self-describing binary checkpoint: a JSON header (config, seed, step,
// vocabularies, parameter names and shapes) followed by raw little-endian
// float64 buffers in header order. Optimizer moments ride along when present.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::vector<std::string> src_tokens;  // id -> token
  std::vector<std::string> tgt_tokens;
  ModelParams params;
  bool has_adam = false;
  std::int64_t adam_step = 0;
  std::vector<std::vector<double>> adam_m;  // aligned with visit_params order
  std::vector<std::vector<double>> adam_v;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace attnlink
