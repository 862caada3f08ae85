#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "attnlink/data.hpp"
#include "attnlink/model.hpp"
#include "attnlink/train.hpp"
#include "attnlink/vocab_ids.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace attnlink;

namespace {

ModelConfig tiny_config(std::int64_t src_vocab, std::int64_t tgt_vocab) {
  ModelConfig c;
  c.d = 8;
  c.d_q = c.d_k = c.d_v = 8;
  c.d_hidden = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.placement = LinkPlacement::none;
  c.dropout = 0.0;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.max_seq_len = 32;
  return c;
}

double naive_smoothed_xent(const oracle::Mat& logits, const std::vector<int>& labels,
                           double smoothing) {
  const std::size_t V = logits.size(), n = logits[0].size();
  const double off = smoothing / static_cast<double>(V - 1);
  double total = 0.0;
  std::int64_t used = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (labels[j] == kPadId) continue;
    ++used;
    double mx = logits[0][j];
    for (std::size_t i = 1; i < V; ++i) mx = std::max(mx, logits[i][j]);
    double denom = 0.0;
    for (std::size_t i = 0; i < V; ++i) denom += std::exp(logits[i][j] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t i = 0; i < V; ++i) {
      const double q = (static_cast<int>(i) == labels[j]) ? 1.0 - smoothing : off;
      total += q * (lse - logits[i][j]);
    }
  }
  return total / static_cast<double>(used);
}

std::vector<std::vector<double>> all_param_values(const ModelParams& p, const ModelConfig& c) {
  std::vector<std::vector<double>> out;
  visit_params(p, c, [&](const std::string&, const Tensor& t) { out.push_back(t.data()); });
  return out;
}

}  // namespace

TEST_CASE("[DERIVED] warmup schedule closed forms") {
  const double base = 5e-4;
  CHECK(lr_at_step(1, base, 4000) == doctest::Approx(base / 4000.0).epsilon(1e-12));
  CHECK(lr_at_step(4000, base, 4000) == doctest::Approx(base).epsilon(1e-12));
  CHECK(lr_at_step(16000, base, 4000) == doctest::Approx(base / 2.0).epsilon(1e-12));
  CHECK(lr_at_step(1, base, 1) == doctest::Approx(base).epsilon(1e-12));

  // rises through warmup, decays after
  for (std::int64_t s = 1; s < 200; ++s)
    CHECK(lr_at_step(s, base, 200) < lr_at_step(s + 1, base, 200));
  for (std::int64_t s = 200; s < 400; ++s)
    CHECK(lr_at_step(s, base, 200) > lr_at_step(s + 1, base, 200));

  CHECK_THROWS_AS(lr_at_step(0, base, 10), std::invalid_argument);
  CHECK_THROWS_AS(lr_at_step(5, base, 0), std::invalid_argument);
}

TEST_CASE("[DERIVED] label smoothed cross entropy value matches the reference") {
  Rng rng(12);
  oracle::Mat lm = oracle::rand_mat(7, 5, rng, -3.0, 3.0);
  const std::vector<int> labels_ok{4, kPadId, 6, 5, 3};
  Tensor logits = Tensor::constant({7, 5}, oracle::flatten(lm));

  for (double s : {0.0, 0.1, 0.4}) {
    Tensor loss = label_smoothed_xent(logits, labels_ok, s);
    CHECK(loss.shape() == Shape{});
    CHECK(loss.item() ==
          doctest::Approx(naive_smoothed_xent(lm, labels_ok, s)).epsilon(1e-12));
  }

  // all-equal logits give exactly log V for any smoothing
  Tensor flat = Tensor::full({9, 3}, 0.37);
  Tensor l0 = label_smoothed_xent(flat, {5, 6, 7}, 0.1);
  CHECK(l0.item() == doctest::Approx(std::log(9.0)).epsilon(1e-12));

  // smoothing 0 is plain cross entropy on the labeled row
  Tensor nll = label_smoothed_xent(logits, {2, 2, 2, 2, 2}, 0.0);
  double want = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    double mx = lm[0][j];
    for (std::size_t i = 1; i < 7; ++i) mx = std::max(mx, lm[i][j]);
    double denom = 0.0;
    for (std::size_t i = 0; i < 7; ++i) denom += std::exp(lm[i][j] - mx);
    want += mx + std::log(denom) - lm[2][j];
  }
  CHECK(nll.item() == doctest::Approx(want / 5.0).epsilon(1e-12));
}

TEST_CASE("[DERIVED] label smoothed cross entropy gradient matches central differences") {
  Rng rng(21);
  oracle::Mat lm = oracle::rand_mat(6, 4, rng, -2.0, 2.0);
  Tensor logits = Tensor::parameter({6, 4}, oracle::flatten(lm), "logits");
  const std::vector<int> labels{3, 5, kPadId, 2};
  const double s = 0.1;

  Graph g;
  {
    Graph::Scope scope(g);
    Tensor loss = label_smoothed_xent(logits, labels, s);
    backward(loss);
  }
  REQUIRE(logits.has_grad());

  auto eval = [&]() { return label_smoothed_xent(logits, labels, s).item(); };
  oracle::GradCheck worst;
  oracle::check_param_grads(worst, eval, logits.raw_data(), logits.grad(), "logits");
  CAPTURE(worst.where);
  CHECK(worst.max_rel_err <= 1e-6);

  // pad columns receive exactly zero gradient
  for (std::size_t i = 0; i < 6; ++i) CHECK(logits.grad()[i * 4 + 2] == 0.0);
}

TEST_CASE("[TRIVIAL] label smoothed cross entropy rejects malformed input") {
  Tensor logits = Tensor::full({5, 3}, 0.0);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {1, 2}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {1, 2, 9}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {1, 2, -1}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {kPadId, kPadId, kPadId}, 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {1, 2, 3}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(label_smoothed_xent(logits, {1, 2, 3}, -0.1), std::invalid_argument);
}

TEST_CASE("[DERIVED] one adam step matches the hand formula") {
  ModelConfig c = tiny_config(6, 6);
  ModelParams p = init_params(c, 3);
  AdamState st = init_adam(p, c);

  OptimConfig opt;
  opt.beta1 = 0.9;
  opt.beta2 = 0.98;
  opt.eps = 1e-8;
  opt.weight_decay = 0.01;
  const double lr = 0.1;

  // inject a known gradient into one parameter, leave the rest untouched
  Tensor& wq0 = p.encoder[0].self_attn.wq[0];
  const std::vector<double> before = wq0.data();
  const std::vector<double> bias_before = p.out_b.data();
  auto& gbuf = wq0.node()->grad_buf();
  for (std::size_t i = 0; i < gbuf.size(); ++i) gbuf[i] = (i % 2 == 0) ? 2.0 : -0.5;

  adam_step(p, c, st, opt, lr, 1.0);
  CHECK(st.step == 1);

  for (std::size_t i = 0; i < before.size(); ++i) {
    const double g = (i % 2 == 0) ? 2.0 : -0.5;
    const double m_hat = g;            // m/(1-b1) after one step
    const double v_hat = g * g;        // v/(1-b2) after one step
    const double decayed = before[i] - lr * opt.weight_decay * before[i];
    const double want = decayed - lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    CHECK(wq0.data()[i] == doctest::Approx(want).epsilon(1e-13));
  }
  // gradient-free parameters still feel the decoupled decay
  for (std::size_t i = 0; i < bias_before.size(); ++i)
    CHECK(p.out_b.data()[i] ==
          doctest::Approx(bias_before[i] * (1.0 - lr * opt.weight_decay)).epsilon(1e-13));

  // grad_scale multiplies gradients on the way in
  ModelParams p2 = init_params(c, 3);
  AdamState st2 = init_adam(p2, c);
  auto& gbuf2 = p2.encoder[0].self_attn.wq[0].node()->grad_buf();
  for (std::size_t i = 0; i < gbuf2.size(); ++i) gbuf2[i] = (i % 2 == 0) ? 4.0 : -1.0;
  adam_step(p2, c, st2, opt, lr, 0.5);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(p2.encoder[0].self_attn.wq[0].data()[i] ==
          doctest::Approx(wq0.data()[i]).epsilon(1e-13));

  // non-finite gradients are reported with the parameter name
  auto& gbad = p2.memory.wk[1].node()->grad_buf();
  gbad[0] = std::nan("");
  try {
    adam_step(p2, c, st2, opt, lr, 1.0);
    FAIL("expected runtime_error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("mem.wk1") != std::string::npos);
  }
}

TEST_CASE("[DERIVED] global gradient norm") {
  ModelConfig c = tiny_config(6, 6);
  ModelParams p = init_params(c, 3);
  CHECK(global_grad_norm(p, c) == 0.0);
  auto& g1 = p.out_b.node()->grad_buf();
  g1[0] = 3.0;
  auto& g2 = p.src_embedding.node()->grad_buf();
  g2[5] = 4.0;
  CHECK(global_grad_norm(p, c) == doctest::Approx(5.0).epsilon(1e-14));
}

TEST_CASE("[DERIVED] batch planning packs by target length under the cap") {
  std::vector<EncodedPair> pairs;
  for (std::size_t len : {4, 1, 5, 2, 3}) {
    EncodedPair e;
    e.src = std::vector<int>(len + 1, 5);
    e.tgt = std::vector<int>(len, 5);
    pairs.push_back(e);
  }
  auto batches = plan_batches(pairs, 7);
  // costs are tgt+1: sorted 2,3,4,5,6 -> {2,3}, {4}, {5}, {6}
  REQUIRE(batches.size() == 4);
  CHECK(batches[0] == std::vector<std::size_t>{1, 3});
  CHECK(batches[1] == std::vector<std::size_t>{4});
  CHECK(batches[2] == std::vector<std::size_t>{0});
  CHECK(batches[3] == std::vector<std::size_t>{2});

  // every index appears exactly once and every batch respects the cap
  std::vector<int> seen(pairs.size(), 0);
  for (const auto& b : batches) {
    std::int64_t tokens = 0;
    for (std::size_t i : b) {
      ++seen[i];
      tokens += static_cast<std::int64_t>(pairs[i].tgt.size()) + 1;
    }
    CHECK(tokens <= 7);
  }
  for (int s : seen) CHECK(s == 1);

  // an oversized sentence still trains, alone
  auto lone = plan_batches(pairs, 3);
  bool found = false;
  for (const auto& b : lone)
    if (b == std::vector<std::size_t>{2}) found = true;
  CHECK(found);

  // ties broken by source length then original index, so plans are stable
  std::vector<EncodedPair> ties(3, EncodedPair{{1, 1}, {7}});
  ties[1].src = {1};
  auto tb = plan_batches(ties, 100);
  REQUIRE(tb.size() == 1);
  CHECK(tb[0] == std::vector<std::size_t>{1, 0, 2});

  CHECK_THROWS_AS(plan_batches(pairs, 0), std::invalid_argument);
}

TEST_CASE("[DERIVED] training learns a tiny copy task and is reproducible") {
  ToyConfig toy;
  toy.task = ToyTask::copy;
  toy.pairs = 40;
  toy.vocab_words = 6;
  toy.min_len = 2;
  toy.max_len = 5;
  toy.seed = 9;
  Corpus corpus = gen_toy_corpus(toy);
  Vocab sv = Vocab::build(corpus, true);
  Vocab tv = Vocab::build(corpus, false);
  auto pairs = encode_corpus(corpus, sv, tv);

  ModelConfig c = tiny_config(sv.size(), tv.size());
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_tokens = 64;
  tc.seed = 4;
  tc.optim.base_lr = 1e-2;
  tc.optim.warmup = 20;

  ModelParams p1 = init_params(c, 17);
  AdamState a1 = init_adam(p1, c);
  std::vector<std::int64_t> seen_epochs;
  TrainResult r1 = train(p1, c, a1, pairs, tc,
                         [&](const EpochStats& e) { seen_epochs.push_back(e.epoch); });

  REQUIRE(r1.epochs.size() == 30);
  CHECK_FALSE(r1.diverged);
  CHECK(seen_epochs.front() == 1);
  CHECK(seen_epochs.back() == 30);
  CHECK(r1.epochs.back().loss < r1.epochs.front().loss);
  CHECK(r1.epochs.back().token_accuracy > r1.epochs.front().token_accuracy);
  CHECK(r1.epochs.back().token_accuracy > 0.5);
  CHECK(r1.steps == r1.epochs.back().step);
  CHECK(r1.epochs.back().lr == lr_at_step(r1.steps, tc.optim.base_lr, tc.optim.warmup));

  ModelParams p2 = init_params(c, 17);
  AdamState a2 = init_adam(p2, c);
  TrainResult r2 = train(p2, c, a2, pairs, tc);
  REQUIRE(r2.epochs.size() == r1.epochs.size());
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
    CHECK(r1.epochs[i].loss == r2.epochs[i].loss);
    CHECK(r1.epochs[i].token_accuracy == r2.epochs[i].token_accuracy);
  }
  auto v1 = all_param_values(p1, c), v2 = all_param_values(p2, c);
  REQUIRE(v1.size() == v2.size());
  for (std::size_t i = 0; i < v1.size(); ++i)
    CHECK(std::memcmp(v1[i].data(), v2[i].data(), v1[i].size() * sizeof(double)) == 0);
}

TEST_CASE("[DERIVED] divergence rolls back to the last finished epoch") {
  ToyConfig toy;
  toy.task = ToyTask::copy;
  toy.pairs = 10;
  toy.vocab_words = 5;
  toy.min_len = 2;
  toy.max_len = 4;
  toy.seed = 2;
  Corpus corpus = gen_toy_corpus(toy);
  Vocab sv = Vocab::build(corpus, true);
  Vocab tv = Vocab::build(corpus, false);
  auto pairs = encode_corpus(corpus, sv, tv);

  ModelConfig c = tiny_config(sv.size(), tv.size());
  ModelParams p = init_params(c, 8);
  const auto initial = all_param_values(p, c);
  AdamState a = init_adam(p, c);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_tokens = 16;  // several batches per epoch, so the blowup is mid-epoch
  tc.optim.base_lr = 1e200;
  tc.optim.warmup = 1;
  tc.optim.clip_norm = 0.0;  // let it blow up
  TrainResult r = train(p, c, a, pairs, tc);

  CHECK(r.diverged);
  CHECK(r.epochs.empty());
  CHECK(a.step == 0);
  auto now = all_param_values(p, c);
  for (std::size_t i = 0; i < now.size(); ++i)
    CHECK(std::memcmp(now[i].data(), initial[i].data(), now[i].size() * sizeof(double)) == 0);
}

TEST_CASE("[TRIVIAL] train input validation") {
  ModelConfig c = tiny_config(6, 6);
  ModelParams p = init_params(c, 1);
  AdamState a = init_adam(p, c);
  TrainConfig tc;
  CHECK_THROWS_AS(train(p, c, a, {}, tc), std::invalid_argument);
  tc.epochs = 0;
  std::vector<EncodedPair> pairs{{{4, 5}, {4, 5}}};
  CHECK_THROWS_AS(train(p, c, a, pairs, tc), std::invalid_argument);
}
