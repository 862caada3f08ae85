#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "attnlink/model.hpp"

// Command-line front end. One flat run configuration feeds every subcommand;
// values come from defaults, then an optional --config JSON document, then
// explicit flags, in that order. Each run writes its artifacts plus a
// manifest (command, fully resolved config, artifact hashes) into --out-dir,
// and a manifest is itself accepted wherever a config is.

namespace attnlink {

struct RunConfig {
  // model
  std::int64_t d = 512;
  std::int64_t d_q = 128;
  std::int64_t d_k = 128;
  std::int64_t d_v = 128;
  std::int64_t d_hidden = 1024;
  std::int64_t heads = 4;
  std::int64_t enc_layers = 6;
  std::int64_t dec_layers = 6;
  std::string placement = "both";
  double link_lambda = 1.0;
  std::string link_source = "cached";
  double dropout = 0.1;
  std::int64_t max_seq_len = 256;
  bool scale_logits = true;
  bool zero_link_logits = false;
  // training
  std::int64_t epochs = 10;
  std::int64_t batch_tokens = 512;
  double label_smoothing = 0.1;
  double base_lr = 5e-4;
  std::int64_t warmup = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  // data
  std::string task = "copy";
  std::int64_t pairs = 1000;
  std::int64_t vocab_words = 40;
  std::int64_t min_len = 3;
  std::int64_t max_len = 12;
  double swap_prob = 0.5;
  std::uint64_t data_seed = 1;
  std::int64_t test_pairs = 0;   // gen-data: extra pairs split into test.tsv
  std::int64_t train_pairs = 0;  // train: subsample cap, 0 keeps everything
  std::int64_t max_vocab = 0;    // 0 = unlimited
  std::string train_path;
  std::string test_path;
  // evaluation and dumping
  std::string checkpoint_path;
  std::int64_t decode_max_len = 64;
  std::string dump_src;
  std::string dump_tgt;  // empty: greedy-decode the source first
  // theory simulation
  std::int64_t sim_n = 64;
  double sim_sigma0 = 0.05;
  std::int64_t sim_trials = 1000;
  std::uint64_t sim_seed = 1;
  bool sim_normalize = false;
  std::string sim_gamma_mode = "zero";
  double sim_gamma_std = 0.0;
  bool sim_csv = false;  // also write per-trial stats as CSV
  // lemma check
  std::uint64_t lemma_seed = 1;
  std::int64_t lemma_inputs = 5;
  // output
  std::string out_dir;
};

// Strict parse: unknown keys are rejected, types must match. A manifest
// document ({"command", "config", "artifacts"}) is unwrapped to its config.
RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);

// Model portion of the run config with vocabulary sizes filled in; validated.
ModelConfig model_config_from(const RunConfig& cfg, std::int64_t src_vocab,
                              std::int64_t tgt_vocab);

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::uint64_t fnv1a64_file(const std::string& path);

// Runs one subcommand (args exclude the program name). Returns 0 on success,
// 1 on usage/validation errors, 2 on runtime failures.
int dispatch(std::vector<std::string> args);

}  // namespace attnlink
