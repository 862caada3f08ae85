#include "attnlink/model.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "attnlink/vocab_ids.hpp"

namespace attnlink {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

std::string to_string(LinkPlacement p) {
  switch (p) {
    case LinkPlacement::none: return "none";
    case LinkPlacement::encoder: return "encoder";
    case LinkPlacement::decoder: return "decoder";
    case LinkPlacement::both: return "both";
  }
  throw std::invalid_argument("unknown LinkPlacement value");
}

LinkPlacement placement_from_string(const std::string& s) {
  if (s == "none") return LinkPlacement::none;
  if (s == "encoder") return LinkPlacement::encoder;
  if (s == "decoder") return LinkPlacement::decoder;
  if (s == "both") return LinkPlacement::both;
  throw std::invalid_argument("unknown link placement \"" + s +
                              "\" (expected none|encoder|decoder|both)");
}

std::string to_string(LinkSource s) {
  switch (s) {
    case LinkSource::cached: return "cached";
    case LinkSource::reprojected: return "reprojected";
  }
  throw std::invalid_argument("unknown LinkSource value");
}

LinkSource link_source_from_string(const std::string& s) {
  if (s == "cached") return LinkSource::cached;
  if (s == "reprojected") return LinkSource::reprojected;
  throw std::invalid_argument("unknown link source \"" + s +
                              "\" (expected cached|reprojected)");
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  auto positive = [&](std::int64_t v, const char* field) {
    if (v < 1) bad.push_back(std::string(field) + " must be >= 1");
  };
  positive(d, "d");
  positive(d_q, "d_q");
  positive(d_k, "d_k");
  positive(d_v, "d_v");
  positive(d_hidden, "d_hidden");
  positive(heads, "heads");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  if (max_seq_len < 2) bad.push_back("max_seq_len must be >= 2");
  if (src_vocab < kReservedIds + 1)
    bad.push_back("src_vocab must exceed the " + std::to_string(kReservedIds) +
                  " reserved ids");
  if (tgt_vocab < kReservedIds + 1)
    bad.push_back("tgt_vocab must exceed the " + std::to_string(kReservedIds) +
                  " reserved ids");
  if (heads >= 1) {
    if (d_q % heads != 0) bad.push_back("d_q must be divisible by heads");
    if (d_k % heads != 0) bad.push_back("d_k must be divisible by heads");
    if (d_v % heads != 0) bad.push_back("d_v must be divisible by heads");
  }
  if (d_q != d_k)
    bad.push_back("d_q must equal d_k (query/key dot products)");
  if (!(dropout >= 0.0 && dropout < 1.0))
    bad.push_back("dropout must lie in [0, 1)");
  if (!std::isfinite(link_lambda)) bad.push_back("link_lambda must be finite");
  if (!bad.empty()) {
    std::string msg = "invalid model config: ";
    for (std::size_t i = 0; i < bad.size(); ++i) {
      if (i) msg += "; ";
      msg += bad[i];
    }
    throw std::invalid_argument(msg);
  }
}

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return nlohmann::json{{"d", c.d},
                        {"d_q", c.d_q},
                        {"d_k", c.d_k},
                        {"d_v", c.d_v},
                        {"d_hidden", c.d_hidden},
                        {"heads", c.heads},
                        {"enc_layers", c.enc_layers},
                        {"dec_layers", c.dec_layers},
                        {"placement", to_string(c.placement)},
                        {"link_lambda", c.link_lambda},
                        {"link_source", to_string(c.link_source)},
                        {"dropout", c.dropout},
                        {"src_vocab", c.src_vocab},
                        {"tgt_vocab", c.tgt_vocab},
                        {"max_seq_len", c.max_seq_len},
                        {"scale_logits", c.scale_logits},
                        {"zero_link_logits", c.zero_link_logits}};
}

ModelConfig config_parse(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  static const char* keys[] = {"d",           "d_q",        "d_k",
                               "d_v",         "d_hidden",   "heads",
                               "enc_layers",  "dec_layers", "placement",
                               "link_lambda", "link_source", "dropout",
                               "src_vocab",   "tgt_vocab",  "max_seq_len",
                               "scale_logits", "zero_link_logits"};
  for (const char* k : keys)
    if (!j.contains(k))
      throw std::invalid_argument(std::string("model config missing key \"") + k + "\"");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known)
      throw std::invalid_argument("model config has unknown key \"" + it.key() + "\"");
  }
  ModelConfig c;
  c.d = j.at("d").get<std::int64_t>();
  c.d_q = j.at("d_q").get<std::int64_t>();
  c.d_k = j.at("d_k").get<std::int64_t>();
  c.d_v = j.at("d_v").get<std::int64_t>();
  c.d_hidden = j.at("d_hidden").get<std::int64_t>();
  c.heads = j.at("heads").get<std::int64_t>();
  c.enc_layers = j.at("enc_layers").get<std::int64_t>();
  c.dec_layers = j.at("dec_layers").get<std::int64_t>();
  c.placement = placement_from_string(j.at("placement").get<std::string>());
  c.link_lambda = j.at("link_lambda").get<double>();
  c.link_source = link_source_from_string(j.at("link_source").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.src_vocab = j.at("src_vocab").get<std::int64_t>();
  c.tgt_vocab = j.at("tgt_vocab").get<std::int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::int64_t>();
  c.scale_logits = j.at("scale_logits").get<bool>();
  c.zero_link_logits = j.at("zero_link_logits").get<bool>();
  c.validate();
  return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) { return config_json(c).dump(2); }

ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("model config is not valid JSON: ") + e.what());
  }
  return config_parse(j);
}

void visit_params(ModelParams& p, const ModelConfig& cfg,
                  const std::function<void(const std::string&, const Shape&, ParamKind, Tensor&)>& fn) {
  cfg.validate();
  const std::int64_t h = cfg.heads;
  const std::int64_t dq = cfg.d_q / h;
  const std::int64_t dk = cfg.d_k / h;
  const std::int64_t dv = cfg.d_v / h;

  auto attn = [&](AttentionParams& a, const std::string& prefix) {
    a.wq.resize(h);
    a.wk.resize(h);
    a.wv.resize(h);
    a.wo.resize(h);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wq" + std::to_string(i), {dq, cfg.d}, ParamKind::weight, a.wq[i]);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wk" + std::to_string(i), {dk, cfg.d}, ParamKind::weight, a.wk[i]);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wv" + std::to_string(i), {dv, cfg.d}, ParamKind::weight, a.wv[i]);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wo" + std::to_string(i), {cfg.d, dv}, ParamKind::weight, a.wo[i]);
  };
  auto cross = [&](CrossAttnParams& a, const std::string& prefix) {
    a.wq.resize(h);
    a.wo.resize(h);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wq" + std::to_string(i), {dq, cfg.d}, ParamKind::weight, a.wq[i]);
    for (std::int64_t i = 0; i < h; ++i)
      fn(prefix + ".wo" + std::to_string(i), {cfg.d, dv}, ParamKind::weight, a.wo[i]);
  };
  auto norm = [&](LayerNormParams& ln, const std::string& prefix) {
    fn(prefix + ".gain", {cfg.d}, ParamKind::gain, ln.gain);
    fn(prefix + ".bias", {cfg.d}, ParamKind::bias, ln.bias);
  };
  auto ffn = [&](FFNParams& f, const std::string& prefix) {
    fn(prefix + ".w1", {cfg.d_hidden, cfg.d}, ParamKind::weight, f.w1);
    fn(prefix + ".b1", {cfg.d_hidden}, ParamKind::bias, f.b1);
    fn(prefix + ".w2", {cfg.d, cfg.d_hidden}, ParamKind::weight, f.w2);
    fn(prefix + ".b2", {cfg.d}, ParamKind::bias, f.b2);
  };

  fn("src_emb", {cfg.d, cfg.src_vocab}, ParamKind::weight, p.src_embedding);
  fn("tgt_emb", {cfg.d, cfg.tgt_vocab}, ParamKind::weight, p.tgt_embedding);

  p.encoder.resize(cfg.enc_layers);
  for (std::int64_t n = 0; n < cfg.enc_layers; ++n) {
    const std::string pre = "enc" + std::to_string(n);
    attn(p.encoder[n].self_attn, pre + ".self");
    norm(p.encoder[n].ln_self, pre + ".ln_self");
    ffn(p.encoder[n].ffn, pre + ".ffn");
    norm(p.encoder[n].ln_ffn, pre + ".ln_ffn");
  }

  p.memory.wk.resize(h);
  p.memory.wv.resize(h);
  for (std::int64_t i = 0; i < h; ++i)
    fn("mem.wk" + std::to_string(i), {dk, cfg.d}, ParamKind::weight, p.memory.wk[i]);
  for (std::int64_t i = 0; i < h; ++i)
    fn("mem.wv" + std::to_string(i), {dv, cfg.d}, ParamKind::weight, p.memory.wv[i]);

  p.decoder.resize(cfg.dec_layers);
  for (std::int64_t n = 0; n < cfg.dec_layers; ++n) {
    const std::string pre = "dec" + std::to_string(n);
    attn(p.decoder[n].self_attn, pre + ".self");
    norm(p.decoder[n].ln_self, pre + ".ln_self");
    cross(p.decoder[n].cross_attn, pre + ".cross");
    norm(p.decoder[n].ln_cross, pre + ".ln_cross");
    ffn(p.decoder[n].ffn, pre + ".ffn");
    norm(p.decoder[n].ln_ffn, pre + ".ln_ffn");
  }

  fn("out.w", {cfg.tgt_vocab, cfg.d}, ParamKind::weight, p.out_w);
  fn("out.b", {cfg.tgt_vocab}, ParamKind::bias, p.out_b);
}

void visit_params(const ModelParams& p, const ModelConfig& cfg,
                  const std::function<void(const std::string&, const Tensor&)>& fn) {
  auto& mut = const_cast<ModelParams&>(p);
  visit_params(mut, cfg,
               [&](const std::string& name, const Shape& shape, ParamKind, Tensor& t) {
                 if (!t.defined())
                   throw std::invalid_argument("parameter \"" + name + "\" is undefined");
                 if (t.shape() != shape)
                   throw std::invalid_argument("parameter \"" + name + "\" has shape " +
                                               shape_str(t.shape()) + ", expected " +
                                               shape_str(shape));
                 fn(name, t);
               });
}

std::int64_t parameter_count(const ModelParams& p, const ModelConfig& cfg) {
  std::int64_t total = 0;
  visit_params(p, cfg, [&](const std::string&, const Tensor& t) { total += t.numel(); });
  return total;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p;
  Rng rng(seed);
  visit_params(p, cfg, [&](const std::string& name, const Shape& shape, ParamKind kind, Tensor& t) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    switch (kind) {
      case ParamKind::weight: {
        if (shape.size() != 2)
          throw std::invalid_argument("weight \"" + name + "\" must be 2-d");
        const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        for (double& x : v) x = rng.uniform(-bound, bound);
        break;
      }
      case ParamKind::bias:
        break;
      case ParamKind::gain:
        std::fill(v.begin(), v.end(), 1.0);
        break;
    }
    t = Tensor::parameter(shape, v, name);
  });
  return p;
}

Tensor positional_encoding(std::int64_t d, std::int64_t n) {
  if (d < 1 || n < 1)
    throw std::invalid_argument("positional_encoding needs d >= 1 and n >= 1");
  std::vector<double> v(static_cast<std::size_t>(d * n));
  for (std::int64_t i = 0; i < d; ++i) {
    const std::int64_t pair = i / 2;
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(d));
    for (std::int64_t pos = 0; pos < n; ++pos) {
      const double angle = static_cast<double>(pos) * freq;
      v[static_cast<std::size_t>(i * n + pos)] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::constant({d, n}, std::move(v));
}

namespace {

// Layer norm over the model dimension: the public op normalizes rows, our
// activations keep features in rows and positions in columns.
Tensor ln_positions(const Tensor& x, const LayerNormParams& ln) {
  return transpose(layer_norm(transpose(x), ln.gain, ln.bias));
}

Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& x : v) x = rng.uniform() >= rate ? keep_scale : 0.0;
  return Tensor::constant(shape, std::move(v));
}

Tensor maybe_dropout(const Tensor& x, const ModelConfig& cfg, RunMode mode, Rng* rng) {
  if (mode != RunMode::train || cfg.dropout == 0.0) return x;
  return mul(x, dropout_mask(x.shape(), cfg.dropout, *rng));
}

Tensor embed_sequence(const Tensor& table, const std::vector<int>& ids,
                      std::int64_t d) {
  Tensor x = embed_cols(table, ids);
  x = scale(x, std::sqrt(static_cast<double>(d)));
  return add(x, positional_encoding(d, static_cast<std::int64_t>(ids.size())));
}

void check_ids(const std::vector<int>& ids, std::int64_t vocab,
               std::int64_t max_seq_len, const char* what) {
  if (ids.empty())
    throw std::invalid_argument(std::string(what) + " ids must be non-empty");
  if (static_cast<std::int64_t>(ids.size()) > max_seq_len)
    throw std::invalid_argument(std::string(what) + " length " + std::to_string(ids.size()) +
                                " exceeds max_seq_len " + std::to_string(max_seq_len));
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= vocab)
      throw std::invalid_argument(std::string(what) + " id " + std::to_string(ids[i]) +
                                  " at position " + std::to_string(i) +
                                  " is outside vocab of size " + std::to_string(vocab));
}

void check_train_rng(const ModelConfig& cfg, RunMode mode, Rng* rng) {
  if (mode == RunMode::train && cfg.dropout > 0.0 && rng == nullptr)
    throw std::invalid_argument("train mode with dropout > 0 needs a dropout rng");
}

AttentionRecord zero_logit_record(const AttentionRecord& r) {
  AttentionRecord z;
  z.layer = r.layer;
  z.kind = r.kind;
  z.decoder_stack = r.decoder_stack;
  z.logits.reserve(r.logits.size());
  z.probs.reserve(r.probs.size());
  for (const Tensor& l : r.logits) z.logits.push_back(Tensor::zeros(l.shape()));
  for (const Tensor& pr : r.probs) z.probs.push_back(Tensor::zeros(pr.shape()));
  return z;
}

// Residual sublayer wrapper: x = LN(x + Dropout(f(x))).
Tensor post_ln(const Tensor& x, const Tensor& sub, const LayerNormParams& ln,
               const ModelConfig& cfg, RunMode mode, Rng* rng) {
  return ln_positions(add(x, maybe_dropout(sub, cfg, mode, rng)), ln);
}

}  // namespace

EncodeResult encode(const ModelParams& params, const ModelConfig& cfg,
                    const std::vector<int>& src_ids, RunMode mode, Rng* rng) {
  cfg.validate();
  check_ids(src_ids, cfg.src_vocab, cfg.max_seq_len, "source");
  check_train_rng(cfg, mode, rng);
  if (static_cast<std::int64_t>(params.encoder.size()) != cfg.enc_layers)
    throw std::invalid_argument("params have " + std::to_string(params.encoder.size()) +
                                " encoder layers, config says " + std::to_string(cfg.enc_layers));

  EncodeResult out;
  out.records.reserve(static_cast<std::size_t>(cfg.enc_layers));
  Tensor x = embed_sequence(params.src_embedding, src_ids, cfg.d);
  x = maybe_dropout(x, cfg, mode, rng);

  const bool linked = cfg.link_encoder();
  for (std::int64_t n = 0; n < cfg.enc_layers; ++n) {
    const EncoderLayer& layer = params.encoder[n];
    const AttentionRecord* prev = nullptr;
    const AttentionParams* prev_params = nullptr;
    AttentionRecord zero_prev;
    if (linked && n > 0) {
      prev = &out.records.back();
      if (cfg.zero_link_logits) {
        zero_prev = zero_logit_record(*prev);
        prev = &zero_prev;
      }
      if (cfg.link_source == LinkSource::reprojected)
        prev_params = &params.encoder[n - 1].self_attn;
    }
    AttnResult attn =
        linked_self_attention(x, layer.self_attn, prev, prev_params, cfg.link_source,
                              cfg.link_lambda, /*causal=*/false, cfg.scale_logits,
                              n, /*decoder_stack=*/false);
    x = post_ln(x, attn.y, layer.ln_self, cfg, mode, rng);
    Tensor hidden_mask;
    if (mode == RunMode::train && cfg.dropout > 0.0)
      hidden_mask = dropout_mask({cfg.d_hidden, static_cast<std::int64_t>(src_ids.size())},
                                 cfg.dropout, *rng);
    Tensor f = ffn(x, layer.ffn, hidden_mask);
    x = post_ln(x, f, layer.ln_ffn, cfg, mode, rng);
    out.records.push_back(std::move(attn.record));
  }

  out.memory = x;
  const std::int64_t h = cfg.heads;
  if (static_cast<std::int64_t>(params.memory.wk.size()) != h ||
      static_cast<std::int64_t>(params.memory.wv.size()) != h)
    throw std::invalid_argument("memory projection head count does not match config");
  out.keys.reserve(h);
  out.values.reserve(h);
  for (std::int64_t i = 0; i < h; ++i) {
    out.keys.push_back(matmul(params.memory.wk[i], x));
    out.values.push_back(matmul(params.memory.wv[i], x));
  }
  return out;
}

DecodeResult decode_stack(const ModelParams& params, const ModelConfig& cfg,
                          const EncodeResult& enc, const std::vector<int>& tgt_in_ids,
                          RunMode mode, Rng* rng) {
  cfg.validate();
  check_ids(tgt_in_ids, cfg.tgt_vocab, cfg.max_seq_len, "decoder input");
  check_train_rng(cfg, mode, rng);
  if (static_cast<std::int64_t>(params.decoder.size()) != cfg.dec_layers)
    throw std::invalid_argument("params have " + std::to_string(params.decoder.size()) +
                                " decoder layers, config says " + std::to_string(cfg.dec_layers));
  if (static_cast<std::int64_t>(enc.keys.size()) != cfg.heads ||
      static_cast<std::int64_t>(enc.values.size()) != cfg.heads)
    throw std::invalid_argument("encoder memory has " + std::to_string(enc.keys.size()) +
                                " key heads, config says " + std::to_string(cfg.heads));

  const std::int64_t n_tgt = static_cast<std::int64_t>(tgt_in_ids.size());
  Tensor x = embed_sequence(params.tgt_embedding, tgt_in_ids, cfg.d);
  x = maybe_dropout(x, cfg, mode, rng);
  const Tensor causal = causal_keep_mask(n_tgt);

  DecodeResult out;
  out.records.reserve(static_cast<std::size_t>(2 * cfg.dec_layers));
  const bool linked = cfg.link_decoder();
  const AttentionRecord* prev_self = nullptr;
  const AttentionRecord* prev_cross = nullptr;
  for (std::int64_t n = 0; n < cfg.dec_layers; ++n) {
    const DecoderLayer& layer = params.decoder[n];
    AttentionRecord zero_self, zero_cross;
    const AttentionRecord* self_link = nullptr;
    const AttentionRecord* cross_link = nullptr;
    const AttentionParams* self_prev_params = nullptr;
    const CrossAttnParams* cross_prev_params = nullptr;
    if (linked && n > 0) {
      self_link = prev_self;
      cross_link = prev_cross;
      if (cfg.zero_link_logits) {
        zero_self = zero_logit_record(*self_link);
        zero_cross = zero_logit_record(*cross_link);
        self_link = &zero_self;
        cross_link = &zero_cross;
      }
      if (cfg.link_source == LinkSource::reprojected) {
        self_prev_params = &params.decoder[n - 1].self_attn;
        cross_prev_params = &params.decoder[n - 1].cross_attn;
      }
    }

    AttnResult self = linked_self_attention(x, layer.self_attn, self_link, self_prev_params,
                                            cfg.link_source, cfg.link_lambda, /*causal=*/true,
                                            cfg.scale_logits, n, /*decoder_stack=*/true);
    x = post_ln(x, self.y, layer.ln_self, cfg, mode, rng);

    AttnResult crossed =
        linked_cross_attention(x, enc.keys, enc.values, layer.cross_attn, cross_link,
                               cross_prev_params, cfg.link_source, cfg.link_lambda,
                               cfg.scale_logits, n);
    x = post_ln(x, crossed.y, layer.ln_cross, cfg, mode, rng);

    Tensor hidden_mask;
    if (mode == RunMode::train && cfg.dropout > 0.0)
      hidden_mask = dropout_mask({cfg.d_hidden, n_tgt}, cfg.dropout, *rng);
    Tensor f = ffn(x, layer.ffn, hidden_mask);
    x = post_ln(x, f, layer.ln_ffn, cfg, mode, rng);

    out.records.push_back(std::move(self.record));
    out.records.push_back(std::move(crossed.record));
    prev_self = &out.records[out.records.size() - 2];
    prev_cross = &out.records[out.records.size() - 1];
  }

  out.logits = add_col_bias(matmul(params.out_w, x), params.out_b);
  return out;
}

ForwardResult forward(const ModelParams& params, const ModelConfig& cfg,
                      const std::vector<int>& src_ids,
                      const std::vector<int>& tgt_in_ids, RunMode mode, Rng* rng) {
  EncodeResult enc = encode(params, cfg, src_ids, mode, rng);
  DecodeResult dec = decode_stack(params, cfg, enc, tgt_in_ids, mode, rng);
  ForwardResult out;
  out.logits = dec.logits;
  out.records = std::move(enc.records);
  for (AttentionRecord& r : dec.records) out.records.push_back(std::move(r));
  return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'L', 'N', 'K', 'C', 'K', 'P', '1'};

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
  write_bytes(os, v.data(), v.size() * sizeof(double));
}

void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
}

void read_doubles(std::istream& is, std::vector<double>& v, const char* what) {
  read_bytes(is, v.data(), v.size() * sizeof(double), what);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.config.validate();
  std::vector<const Tensor*> tensors;
  nlohmann::json param_list = nlohmann::json::array();
  visit_params(ckpt.params, ckpt.config, [&](const std::string& name, const Tensor& t) {
    param_list.push_back({{"name", name}, {"shape", t.shape()}});
    tensors.push_back(&t);
  });
  if (ckpt.has_adam &&
      (ckpt.adam_m.size() != tensors.size() || ckpt.adam_v.size() != tensors.size()))
    throw std::invalid_argument("checkpoint adam state does not match parameter count");

  nlohmann::json header{{"config", config_json(ckpt.config)},
                        {"seed", ckpt.seed},
                        {"step", ckpt.step},
                        {"src_tokens", ckpt.src_tokens},
                        {"tgt_tokens", ckpt.tgt_tokens},
                        {"params", param_list},
                        {"has_adam", ckpt.has_adam},
                        {"adam_step", ckpt.adam_step}};
  const std::string header_text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t header_len = header_text.size();
  write_bytes(os, &header_len, sizeof(header_len));
  write_bytes(os, header_text.data(), header_text.size());
  for (const Tensor* t : tensors) write_doubles(os, t->data());
  if (ckpt.has_adam) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (ckpt.adam_m[i].size() != tensors[i]->data().size() ||
          ckpt.adam_v[i].size() != tensors[i]->data().size())
        throw std::invalid_argument("checkpoint adam moment size mismatch at index " +
                                    std::to_string(i));
      write_doubles(os, ckpt.adam_m[i]);
      write_doubles(os, ckpt.adam_v[i]);
    }
  }
  os.flush();
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint for reading: " + path);

  char magic[8];
  read_bytes(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  std::uint64_t header_len = 0;
  read_bytes(is, &header_len, sizeof(header_len), "header length");
  if (header_len > (1u << 26))
    throw std::runtime_error("checkpoint header implausibly large");
  std::string header_text(header_len, '\0');
  read_bytes(is, header_text.data(), header_text.size(), "header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = config_parse(header.at("config"));
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.src_tokens = header.at("src_tokens").get<std::vector<std::string>>();
  ckpt.tgt_tokens = header.at("tgt_tokens").get<std::vector<std::string>>();
  ckpt.has_adam = header.at("has_adam").get<bool>();
  ckpt.adam_step = header.at("adam_step").get<std::int64_t>();

  const nlohmann::json& plist = header.at("params");
  std::vector<Tensor*> tensors;
  std::size_t idx = 0;
  visit_params(ckpt.params, ckpt.config,
               [&](const std::string& name, const Shape& shape, ParamKind, Tensor& t) {
                 if (idx >= plist.size())
                   throw std::runtime_error("checkpoint header lists too few parameters");
                 const nlohmann::json& entry = plist.at(idx);
                 if (entry.at("name").get<std::string>() != name)
                   throw std::runtime_error("checkpoint parameter " + std::to_string(idx) +
                                            " is \"" + entry.at("name").get<std::string>() +
                                            "\", expected \"" + name + "\"");
                 if (entry.at("shape").get<Shape>() != shape)
                   throw std::runtime_error("checkpoint parameter \"" + name +
                                            "\" has unexpected shape");
                 t = Tensor::parameter(shape,
                                       std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0),
                                       name);
                 tensors.push_back(&t);
                 ++idx;
               });
  if (idx != plist.size())
    throw std::runtime_error("checkpoint header lists too many parameters");

  for (Tensor* t : tensors) {
    std::vector<double> buf(t->data().size());
    read_doubles(is, buf, "parameter data");
    std::copy(buf.begin(), buf.end(), t->raw_data().begin());
  }
  if (ckpt.has_adam) {
    ckpt.adam_m.resize(tensors.size());
    ckpt.adam_v.resize(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      ckpt.adam_m[i].resize(tensors[i]->data().size());
      ckpt.adam_v[i].resize(tensors[i]->data().size());
      read_doubles(is, ckpt.adam_m[i], "adam m");
      read_doubles(is, ckpt.adam_v[i], "adam v");
    }
  }
  char extra;
  is.read(&extra, 1);
  if (is.gcount() != 0)
    throw std::runtime_error("checkpoint has trailing bytes: " + path);
  return ckpt;
}

}  // namespace attnlink
