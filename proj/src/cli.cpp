#include "attnlink/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"

#include "attnlink/data.hpp"
#include "attnlink/eval.hpp"
#include "attnlink/theory.hpp"
#include "attnlink/train.hpp"
#include "attnlink/vocab_ids.hpp"

namespace attnlink {

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os.flush()) throw std::runtime_error("short write to " + path);
}

std::int64_t want_int(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw std::invalid_argument("run config key '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

std::uint64_t want_uint(const nlohmann::json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
    return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw std::invalid_argument("run config key '" + key + "' must be a nonnegative integer");
}

double want_double(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number())
    throw std::invalid_argument("run config key '" + key + "' must be a number");
  return v.get<double>();
}

bool want_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean())
    throw std::invalid_argument("run config key '" + key + "' must be a boolean");
  return v.get<bool>();
}

std::string want_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string())
    throw std::invalid_argument("run config key '" + key + "' must be a string");
  return v.get<std::string>();
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ToyConfig toy_config_from(const RunConfig& c) {
  ToyConfig t;
  t.task = toy_task_from_string(c.task);
  t.pairs = c.pairs;
  t.vocab_words = c.vocab_words;
  t.min_len = c.min_len;
  t.max_len = c.max_len;
  t.swap_prob = c.swap_prob;
  t.seed = c.data_seed;
  return t;
}

TrainConfig train_config_from(const RunConfig& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch_tokens = c.batch_tokens;
  t.label_smoothing = c.label_smoothing;
  t.seed = c.seed;
  t.optim.base_lr = c.base_lr;
  t.optim.warmup = c.warmup;
  t.optim.beta1 = c.beta1;
  t.optim.beta2 = c.beta2;
  t.optim.eps = c.eps;
  t.optim.weight_decay = c.weight_decay;
  t.optim.clip_norm = c.clip_norm;
  return t;
}

void require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("--out-dir is required");
  fs::create_directories(cfg.out_dir);
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out_dir) / name).string();
}

void write_manifest(const std::string& command, const RunConfig& cfg,
                    const std::vector<std::string>& artifacts,
                    nlohmann::json info = nlohmann::json::object()) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = nlohmann::json::parse(run_config_to_json(cfg));
  nlohmann::json arts = nlohmann::json::object();
  for (const std::string& name : artifacts) arts[name] = hex16(fnv1a64_file(out_path(cfg, name)));
  j["artifacts"] = arts;
  if (!info.empty()) j["info"] = info;
  write_file(out_path(cfg, "manifest.json"), j.dump(2) + "\n");
}

struct LoadedCheckpoint {
  Checkpoint ckpt;
  Vocab src_vocab;
  Vocab tgt_vocab;
};

LoadedCheckpoint load_model(const RunConfig& cfg) {
  if (cfg.checkpoint_path.empty()) throw std::invalid_argument("--checkpoint is required");
  LoadedCheckpoint lc{load_checkpoint(cfg.checkpoint_path), Vocab(), Vocab()};
  lc.src_vocab = Vocab::from_tokens(lc.ckpt.src_tokens);
  lc.tgt_vocab = Vocab::from_tokens(lc.ckpt.tgt_tokens);
  return lc;
}

void run_gen_data(const RunConfig& cfg) {
  if (cfg.test_pairs < 0) throw std::invalid_argument("test_pairs must be nonnegative");
  ToyConfig toy = toy_config_from(cfg);
  toy.pairs = cfg.pairs + cfg.test_pairs;
  // One sequential stream: the first `pairs` entries are identical to a run
  // without the test split, so train sets are stable under test resizing.
  Corpus all = gen_toy_corpus(toy);
  Corpus train_corpus(all.begin(), all.begin() + cfg.pairs);
  require_out_dir(cfg);
  save_corpus_tsv(train_corpus, out_path(cfg, "train.tsv"));
  std::vector<std::string> artifacts{"train.tsv"};
  if (cfg.test_pairs > 0) {
    Corpus test_corpus(all.begin() + cfg.pairs, all.end());
    save_corpus_tsv(test_corpus, out_path(cfg, "test.tsv"));
    artifacts.push_back("test.tsv");
  }
  write_manifest("gen-data", cfg, artifacts);
  std::cout << "wrote " << cfg.pairs << " train pairs";
  if (cfg.test_pairs > 0) std::cout << " and " << cfg.test_pairs << " test pairs";
  std::cout << " to " << cfg.out_dir << "\n";
}

void run_train(const RunConfig& cfg) {
  if (cfg.train_path.empty()) throw std::invalid_argument("--train is required");
  LoadResult loaded = load_corpus_tsv(cfg.train_path);
  Corpus corpus = std::move(loaded.corpus);
  if (cfg.train_pairs > 0) corpus = subsample(corpus, cfg.train_pairs, cfg.data_seed);
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");

  Vocab sv = Vocab::build(corpus, true, cfg.max_vocab);
  Vocab tv = Vocab::build(corpus, false, cfg.max_vocab);
  std::vector<EncodedPair> pairs = encode_corpus(corpus, sv, tv);
  ModelConfig mc = model_config_from(cfg, sv.size(), tv.size());

  ModelParams params = init_params(mc, cfg.seed);
  AdamState adam = init_adam(params, mc);
  TrainConfig tc = train_config_from(cfg);

  require_out_dir(cfg);
  std::ofstream metrics(out_path(cfg, "metrics.jsonl"), std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
  TrainResult res = train(params, mc, adam, pairs, tc, [&](const EpochStats& e) {
    nlohmann::json line{{"epoch", e.epoch},
                        {"step", e.step},
                        {"loss", e.loss},
                        {"token_accuracy", e.token_accuracy},
                        {"lr", e.lr}};
    metrics << line.dump() << "\n";
    metrics.flush();
    std::cout << "epoch " << e.epoch << " step " << e.step << " loss " << fmt17(e.loss)
              << " acc " << fmt17(e.token_accuracy) << " lr " << fmt17(e.lr) << "\n";
  });
  metrics.close();

  Checkpoint ck;
  ck.config = mc;
  ck.seed = cfg.seed;
  ck.step = res.steps;
  ck.src_tokens = sv.tokens();
  ck.tgt_tokens = tv.tokens();
  ck.params = std::move(params);
  ck.has_adam = true;
  ck.adam_step = adam.step;
  ck.adam_m = std::move(adam.m);
  ck.adam_v = std::move(adam.v);
  save_checkpoint(ck, out_path(cfg, "checkpoint.bin"));

  nlohmann::json info{{"pairs_loaded", static_cast<std::int64_t>(pairs.size())},
                      {"lines_skipped", loaded.skipped},
                      {"steps", res.steps},
                      {"diverged", res.diverged}};
  write_manifest("train", cfg, {"checkpoint.bin", "metrics.jsonl"}, info);
  if (res.diverged) std::cout << "training diverged; parameters rolled back\n";
  std::cout << "saved checkpoint after " << res.steps << " steps\n";
}

void run_evaluate(const RunConfig& cfg) {
  if (cfg.test_path.empty()) throw std::invalid_argument("--test is required");
  if (cfg.decode_max_len < 1) throw std::invalid_argument("decode_max_len must be positive");
  LoadedCheckpoint lc = load_model(cfg);
  LoadResult loaded = load_corpus_tsv(cfg.test_path);
  if (loaded.corpus.empty()) throw std::invalid_argument("test corpus is empty");
  std::vector<EncodedPair> pairs = encode_corpus(loaded.corpus, lc.src_vocab, lc.tgt_vocab);

  const double accuracy = token_accuracy(lc.ckpt.params, lc.ckpt.config, pairs);
  std::vector<std::vector<std::string>> refs, hyps;
  std::int64_t exact = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<int> out =
        greedy_decode(lc.ckpt.params, lc.ckpt.config, pairs[i].src, cfg.decode_max_len);
    if (out == pairs[i].tgt) ++exact;
    refs.push_back(loaded.corpus[i].tgt);
    hyps.push_back(lc.tgt_vocab.decode(out));
  }
  BleuBreakdown bleu = corpus_bleu(refs, hyps);
  EntropyReport entropy = corpus_attention_entropy(lc.ckpt.params, lc.ckpt.config, pairs);

  nlohmann::json j;
  j["sentences"] = static_cast<std::int64_t>(pairs.size());
  j["token_accuracy"] = accuracy;
  j["exact_match"] = exact;
  j["bleu"] = {{"score", bleu.score},          {"p1", bleu.precisions[0]},
               {"p2", bleu.precisions[1]},     {"p3", bleu.precisions[2]},
               {"p4", bleu.precisions[3]},     {"brevity_penalty", bleu.brevity_penalty},
               {"hyp_len", bleu.hyp_len},      {"ref_len", bleu.ref_len}};
  nlohmann::json ent = nlohmann::json::array();
  for (const auto& e : entropy.entries) {
    ent.push_back({{"stack", e.decoder_stack ? "decoder" : "encoder"},
                   {"layer", e.layer},
                   {"kind", e.kind == AttnKind::cross_attn ? "cross" : "self"},
                   {"mean_normalized", e.stats.mean_normalized},
                   {"rows", e.stats.rows},
                   {"single_option_rows", e.stats.single_option_rows}});
  }
  j["entropy"] = ent;

  require_out_dir(cfg);
  write_file(out_path(cfg, "eval.json"), j.dump(2) + "\n");
  std::string lines;
  for (const auto& h : hyps) {
    for (std::size_t k = 0; k < h.size(); ++k) {
      if (k) lines += ' ';
      lines += h[k];
    }
    lines += '\n';
  }
  write_file(out_path(cfg, "hypotheses.txt"), lines);
  write_manifest("evaluate", cfg, {"eval.json", "hypotheses.txt"},
                 {{"lines_skipped", loaded.skipped}});
  std::cout << "bleu " << fmt17(bleu.score) << " token_accuracy " << fmt17(accuracy)
            << " exact " << exact << "/" << pairs.size() << "\n";
}

void run_dump_attention(const RunConfig& cfg) {
  if (cfg.dump_src.empty()) throw std::invalid_argument("--src is required");
  if (cfg.decode_max_len < 1) throw std::invalid_argument("decode_max_len must be positive");
  LoadedCheckpoint lc = load_model(cfg);
  std::vector<std::string> src_tokens = tokenize(cfg.dump_src);
  if (src_tokens.empty()) throw std::invalid_argument("--src has no tokens");
  std::vector<std::string> tgt_tokens = tokenize(cfg.dump_tgt);
  if (tgt_tokens.empty()) {
    std::vector<int> out = greedy_decode(lc.ckpt.params, lc.ckpt.config,
                                         lc.src_vocab.encode(src_tokens), cfg.decode_max_len);
    if (out.empty()) throw std::runtime_error("greedy decode produced no tokens to attend from");
    tgt_tokens = lc.tgt_vocab.decode(out);
  }
  std::string text = dump_attention_json(lc.ckpt.params, lc.ckpt.config, src_tokens, tgt_tokens,
                                         lc.src_vocab, lc.tgt_vocab);
  require_out_dir(cfg);
  write_file(out_path(cfg, "attention.json"), text + "\n");
  write_manifest("dump-attention", cfg, {"attention.json"});
  std::cout << "dumped attention for " << src_tokens.size() << " source tokens\n";
}

void run_simulate_theory(const RunConfig& cfg) {
  SimConfig sc;
  sc.n = cfg.sim_n;
  sc.sigma0 = cfg.sim_sigma0;
  sc.trials = cfg.sim_trials;
  sc.seed = cfg.sim_seed;
  sc.normalize = cfg.sim_normalize;
  sc.gamma_mode = gamma_mode_from_string(cfg.sim_gamma_mode);
  sc.gamma_std = cfg.sim_gamma_std;
  sc.validate();

  require_out_dir(cfg);
  std::vector<std::string> artifacts{"theory.json"};
  std::ofstream csv;
  std::function<void(std::int64_t, const TrialStats&)> on_trial;
  if (cfg.sim_csv) {
    csv.open(out_path(cfg, "trials.csv"), std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write trials.csv");
    csv << "trial,mse_vanilla,mse_linked,mean_abs_vanilla,mean_abs_linked,"
           "bound10,bound15,est16,est17\n";
    on_trial = [&](std::int64_t trial, const TrialStats& t) {
      csv << trial << ',' << fmt17(t.mse_vanilla) << ',' << fmt17(t.mse_linked) << ','
          << fmt17(t.mean_abs_vanilla) << ',' << fmt17(t.mean_abs_linked) << ','
          << fmt17(t.bound10) << ',' << fmt17(t.bound15) << ',' << fmt17(t.est16) << ','
          << fmt17(t.est17) << '\n';
    };
    artifacts.push_back("trials.csv");
  }
  RobustnessReport rep = simulate_robustness(sc, on_trial);
  if (csv.is_open()) csv.close();
  write_file(out_path(cfg, "theory.json"), report_to_json(rep) + "\n");
  write_manifest("simulate-theory", cfg, artifacts);
  std::cout << "mse_vanilla " << fmt17(rep.mse_vanilla) << " mse_linked "
            << fmt17(rep.mse_linked);
  if (rep.ratio) std::cout << " ratio " << fmt17(*rep.ratio);
  std::cout << "\n";
}

void run_lemma1_check(const RunConfig& cfg) {
  if (cfg.lemma_inputs < 1) throw std::invalid_argument("n_inputs must be positive");
  const std::int64_t vocab = cfg.vocab_words + kReservedIds;
  ModelConfig mc = model_config_from(cfg, vocab, vocab);
  Lemma1Report rep = lemma1_check(mc, cfg.lemma_seed, cfg.lemma_inputs);
  nlohmann::json j;
  j["lambda_zero"] = rep.lambda_zero;
  j["zeroed_link"] = rep.zeroed_link;
  j["active_link"] = rep.active_link;
  j["model"] = nlohmann::json::parse(config_to_json(mc));
  require_out_dir(cfg);
  write_file(out_path(cfg, "lemma1.json"), j.dump(2) + "\n");
  write_manifest("lemma1-check", cfg, {"lemma1.json"});
  std::cout << "lambda_zero " << fmt17(rep.lambda_zero) << " zeroed_link "
            << fmt17(rep.zeroed_link) << " active_link " << fmt17(rep.active_link) << "\n";
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  if (j.contains("command") && j.contains("config") && j["config"].is_object())
    j = j["config"];  // a manifest reruns as its own config

  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "d") c.d = want_int(v, key);
    else if (key == "d_q") c.d_q = want_int(v, key);
    else if (key == "d_k") c.d_k = want_int(v, key);
    else if (key == "d_v") c.d_v = want_int(v, key);
    else if (key == "d_hidden") c.d_hidden = want_int(v, key);
    else if (key == "heads") c.heads = want_int(v, key);
    else if (key == "enc_layers") c.enc_layers = want_int(v, key);
    else if (key == "dec_layers") c.dec_layers = want_int(v, key);
    else if (key == "placement") c.placement = want_string(v, key);
    else if (key == "link_lambda") c.link_lambda = want_double(v, key);
    else if (key == "link_source") c.link_source = want_string(v, key);
    else if (key == "dropout") c.dropout = want_double(v, key);
    else if (key == "max_seq_len") c.max_seq_len = want_int(v, key);
    else if (key == "scale_logits") c.scale_logits = want_bool(v, key);
    else if (key == "zero_link_logits") c.zero_link_logits = want_bool(v, key);
    else if (key == "epochs") c.epochs = want_int(v, key);
    else if (key == "batch_tokens") c.batch_tokens = want_int(v, key);
    else if (key == "label_smoothing") c.label_smoothing = want_double(v, key);
    else if (key == "base_lr") c.base_lr = want_double(v, key);
    else if (key == "warmup") c.warmup = want_int(v, key);
    else if (key == "beta1") c.beta1 = want_double(v, key);
    else if (key == "beta2") c.beta2 = want_double(v, key);
    else if (key == "eps") c.eps = want_double(v, key);
    else if (key == "weight_decay") c.weight_decay = want_double(v, key);
    else if (key == "clip_norm") c.clip_norm = want_double(v, key);
    else if (key == "seed") c.seed = want_uint(v, key);
    else if (key == "task") c.task = want_string(v, key);
    else if (key == "pairs") c.pairs = want_int(v, key);
    else if (key == "vocab_words") c.vocab_words = want_int(v, key);
    else if (key == "min_len") c.min_len = want_int(v, key);
    else if (key == "max_len") c.max_len = want_int(v, key);
    else if (key == "swap_prob") c.swap_prob = want_double(v, key);
    else if (key == "data_seed") c.data_seed = want_uint(v, key);
    else if (key == "test_pairs") c.test_pairs = want_int(v, key);
    else if (key == "train_pairs") c.train_pairs = want_int(v, key);
    else if (key == "max_vocab") c.max_vocab = want_int(v, key);
    else if (key == "train_path") c.train_path = want_string(v, key);
    else if (key == "test_path") c.test_path = want_string(v, key);
    else if (key == "checkpoint_path") c.checkpoint_path = want_string(v, key);
    else if (key == "decode_max_len") c.decode_max_len = want_int(v, key);
    else if (key == "dump_src") c.dump_src = want_string(v, key);
    else if (key == "dump_tgt") c.dump_tgt = want_string(v, key);
    else if (key == "sim_n") c.sim_n = want_int(v, key);
    else if (key == "sim_sigma0") c.sim_sigma0 = want_double(v, key);
    else if (key == "sim_trials") c.sim_trials = want_int(v, key);
    else if (key == "sim_seed") c.sim_seed = want_uint(v, key);
    else if (key == "sim_normalize") c.sim_normalize = want_bool(v, key);
    else if (key == "sim_gamma_mode") c.sim_gamma_mode = want_string(v, key);
    else if (key == "sim_gamma_std") c.sim_gamma_std = want_double(v, key);
    else if (key == "sim_csv") c.sim_csv = want_bool(v, key);
    else if (key == "lemma_seed") c.lemma_seed = want_uint(v, key);
    else if (key == "lemma_inputs") c.lemma_inputs = want_int(v, key);
    else if (key == "out_dir") c.out_dir = want_string(v, key);
    else throw std::invalid_argument("unknown run config key: " + key);
  }
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["d"] = c.d;
  j["d_q"] = c.d_q;
  j["d_k"] = c.d_k;
  j["d_v"] = c.d_v;
  j["d_hidden"] = c.d_hidden;
  j["heads"] = c.heads;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["placement"] = c.placement;
  j["link_lambda"] = c.link_lambda;
  j["link_source"] = c.link_source;
  j["dropout"] = c.dropout;
  j["max_seq_len"] = c.max_seq_len;
  j["scale_logits"] = c.scale_logits;
  j["zero_link_logits"] = c.zero_link_logits;
  j["epochs"] = c.epochs;
  j["batch_tokens"] = c.batch_tokens;
  j["label_smoothing"] = c.label_smoothing;
  j["base_lr"] = c.base_lr;
  j["warmup"] = c.warmup;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["clip_norm"] = c.clip_norm;
  j["seed"] = c.seed;
  j["task"] = c.task;
  j["pairs"] = c.pairs;
  j["vocab_words"] = c.vocab_words;
  j["min_len"] = c.min_len;
  j["max_len"] = c.max_len;
  j["swap_prob"] = c.swap_prob;
  j["data_seed"] = c.data_seed;
  j["test_pairs"] = c.test_pairs;
  j["train_pairs"] = c.train_pairs;
  j["max_vocab"] = c.max_vocab;
  j["train_path"] = c.train_path;
  j["test_path"] = c.test_path;
  j["checkpoint_path"] = c.checkpoint_path;
  j["decode_max_len"] = c.decode_max_len;
  j["dump_src"] = c.dump_src;
  j["dump_tgt"] = c.dump_tgt;
  j["sim_n"] = c.sim_n;
  j["sim_sigma0"] = c.sim_sigma0;
  j["sim_trials"] = c.sim_trials;
  j["sim_seed"] = c.sim_seed;
  j["sim_normalize"] = c.sim_normalize;
  j["sim_gamma_mode"] = c.sim_gamma_mode;
  j["sim_gamma_std"] = c.sim_gamma_std;
  j["sim_csv"] = c.sim_csv;
  j["lemma_seed"] = c.lemma_seed;
  j["lemma_inputs"] = c.lemma_inputs;
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

ModelConfig model_config_from(const RunConfig& c, std::int64_t src_vocab,
                              std::int64_t tgt_vocab) {
  ModelConfig m;
  m.d = c.d;
  m.d_q = c.d_q;
  m.d_k = c.d_k;
  m.d_v = c.d_v;
  m.d_hidden = c.d_hidden;
  m.heads = c.heads;
  m.enc_layers = c.enc_layers;
  m.dec_layers = c.dec_layers;
  m.placement = placement_from_string(c.placement);
  m.link_lambda = c.link_lambda;
  m.link_source = link_source_from_string(c.link_source);
  m.dropout = c.dropout;
  m.src_vocab = src_vocab;
  m.tgt_vocab = tgt_vocab;
  m.max_seq_len = c.max_seq_len;
  m.scale_logits = c.scale_logits;
  m.zero_link_logits = c.zero_link_logits;
  m.validate();
  return m;
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a64_file(const std::string& path) {
  std::string bytes = read_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

int dispatch(std::vector<std::string> args) {
  CLI::App app{"attention-link transformer toolkit"};
  app.require_subcommand(1);

  RunConfig flags;
  std::string config_path;
  struct Override {
    CLI::Option* opt;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Override> overrides;

  auto bind = [&](CLI::App* sub, const std::string& name, auto RunConfig::* member,
                  const std::string& desc) {
    CLI::Option* opt = sub->add_option(name, flags.*member, desc);
    overrides.push_back({opt, [member, &flags](RunConfig& c) { c.*member = flags.*member; }});
    return opt;
  };
  auto bind_flag = [&](CLI::App* sub, const std::string& name, bool RunConfig::* member,
                       const std::string& desc) {
    CLI::Option* opt = sub->add_flag(name, flags.*member, desc);
    overrides.push_back({opt, [member, &flags](RunConfig& c) { c.*member = flags.*member; }});
    return opt;
  };
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config JSON (or a manifest.json)");
  };
  auto bind_model = [&](CLI::App* sub) {
    bind(sub, "--d", &RunConfig::d, "model width");
    bind(sub, "--d-q", &RunConfig::d_q, "total query dim");
    bind(sub, "--d-k", &RunConfig::d_k, "total key dim");
    bind(sub, "--d-v", &RunConfig::d_v, "total value dim");
    bind(sub, "--d-hidden", &RunConfig::d_hidden, "feed-forward hidden dim");
    bind(sub, "--heads", &RunConfig::heads, "attention heads");
    bind(sub, "--enc-layers", &RunConfig::enc_layers, "encoder layers");
    bind(sub, "--dec-layers", &RunConfig::dec_layers, "decoder layers");
    bind(sub, "--placement", &RunConfig::placement, "link placement: none|encoder|decoder|both");
    bind(sub, "--link-lambda", &RunConfig::link_lambda, "link scale");
    bind(sub, "--link-source", &RunConfig::link_source, "link source: cached|reprojected");
    bind(sub, "--max-seq-len", &RunConfig::max_seq_len, "max sequence length");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
  add_config(gen);
  bind(gen, "--task", &RunConfig::task, "copy|reverse|mapped_shuffle");
  bind(gen, "--pairs", &RunConfig::pairs, "training pairs");
  bind(gen, "--test-pairs", &RunConfig::test_pairs, "extra pairs written to test.tsv");
  bind(gen, "--vocab-words", &RunConfig::vocab_words, "surface vocabulary size");
  bind(gen, "--min-len", &RunConfig::min_len, "min source length");
  bind(gen, "--max-len", &RunConfig::max_len, "max source length");
  bind(gen, "--swap-prob", &RunConfig::swap_prob, "mapped_shuffle adjacent swap probability");
  bind(gen, "--data-seed", &RunConfig::data_seed, "corpus seed");
  bind(gen, "--out-dir", &RunConfig::out_dir, "output directory");

  CLI::App* tr = app.add_subcommand("train", "train a model on a TSV corpus");
  add_config(tr);
  bind(tr, "--train", &RunConfig::train_path, "training corpus TSV");
  bind(tr, "--train-pairs", &RunConfig::train_pairs, "subsample this many pairs (0 = all)");
  bind(tr, "--max-vocab", &RunConfig::max_vocab, "vocabulary cap (0 = unlimited)");
  bind(tr, "--data-seed", &RunConfig::data_seed, "subsample seed");
  bind_model(tr);
  bind(tr, "--dropout", &RunConfig::dropout, "dropout rate");
  bind(tr, "--epochs", &RunConfig::epochs, "training epochs");
  bind(tr, "--batch-tokens", &RunConfig::batch_tokens, "token budget per batch");
  bind(tr, "--label-smoothing", &RunConfig::label_smoothing, "label smoothing");
  bind(tr, "--base-lr", &RunConfig::base_lr, "peak learning rate");
  bind(tr, "--warmup", &RunConfig::warmup, "warmup steps");
  bind(tr, "--beta1", &RunConfig::beta1, "adam beta1");
  bind(tr, "--beta2", &RunConfig::beta2, "adam beta2");
  bind(tr, "--eps", &RunConfig::eps, "adam epsilon");
  bind(tr, "--weight-decay", &RunConfig::weight_decay, "decoupled weight decay");
  bind(tr, "--clip-norm", &RunConfig::clip_norm, "gradient norm cap (0 = off)");
  bind(tr, "--seed", &RunConfig::seed, "training seed");
  bind_flag(tr, "--scale-logits,!--no-scale-logits", &RunConfig::scale_logits,
            "scale logits by 1/sqrt(head key dim)");
  bind_flag(tr, "--zero-link-logits", &RunConfig::zero_link_logits,
            "diagnostic: feed zero link logits");
  bind(tr, "--out-dir", &RunConfig::out_dir, "output directory");

  CLI::App* ev = app.add_subcommand("evaluate", "BLEU/accuracy/entropy against a test TSV");
  add_config(ev);
  bind(ev, "--checkpoint", &RunConfig::checkpoint_path, "model checkpoint");
  bind(ev, "--test", &RunConfig::test_path, "test corpus TSV");
  bind(ev, "--decode-max-len", &RunConfig::decode_max_len, "greedy decode length cap");
  bind(ev, "--out-dir", &RunConfig::out_dir, "output directory");

  CLI::App* du = app.add_subcommand("dump-attention", "serialize attention matrices to JSON");
  add_config(du);
  bind(du, "--checkpoint", &RunConfig::checkpoint_path, "model checkpoint");
  bind(du, "--src", &RunConfig::dump_src, "source sentence (space separated)");
  bind(du, "--tgt", &RunConfig::dump_tgt, "target sentence (defaults to the greedy decode)");
  bind(du, "--decode-max-len", &RunConfig::decode_max_len, "greedy decode length cap");
  bind(du, "--out-dir", &RunConfig::out_dir, "output directory");

  CLI::App* sim = app.add_subcommand("simulate-theory", "Monte Carlo noise-robustness check");
  add_config(sim);
  bind(sim, "--N", &RunConfig::sim_n, "vector length");
  bind(sim, "--sigma0", &RunConfig::sim_sigma0, "perturbation std dev");
  bind(sim, "--trials", &RunConfig::sim_trials, "Monte Carlo trials");
  bind(sim, "--seed", &RunConfig::sim_seed, "simulation seed");
  bind_flag(sim, "--normalize,!--no-normalize", &RunConfig::sim_normalize,
            "renormalize by the perturbed column mass");
  bind(sim, "--gamma-mode", &RunConfig::sim_gamma_mode, "zero|sampled");
  bind(sim, "--gamma-std", &RunConfig::sim_gamma_std, "adjacent-layer logit drift std");
  bind_flag(sim, "--csv", &RunConfig::sim_csv, "also write per-trial trials.csv");
  bind(sim, "--out-dir", &RunConfig::out_dir, "output directory");

  CLI::App* lm = app.add_subcommand("lemma1-check", "inert vs active link witness");
  add_config(lm);
  bind_model(lm);
  bind(lm, "--vocab-words", &RunConfig::vocab_words, "witness vocabulary size");
  bind(lm, "--seed", &RunConfig::lemma_seed, "witness seed");
  bind(lm, "--n-inputs", &RunConfig::lemma_inputs, "random input pairs to test");
  bind(lm, "--out-dir", &RunConfig::out_dir, "output directory");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = run_config_from_json(read_file(config_path));
    for (const Override& o : overrides)
      if (o.opt->count() > 0) o.apply(cfg);

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "gen-data") run_gen_data(cfg);
    else if (name == "train") run_train(cfg);
    else if (name == "evaluate") run_evaluate(cfg);
    else if (name == "dump-attention") run_dump_attention(cfg);
    else if (name == "simulate-theory") run_simulate_theory(cfg);
    else run_lemma1_check(cfg);
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace attnlink
