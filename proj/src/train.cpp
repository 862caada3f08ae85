#include "attnlink/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "attnlink/vocab_ids.hpp"

namespace attnlink {

double lr_at_step(std::int64_t step, double base, std::int64_t warmup) {
  if (step < 1) throw std::invalid_argument("lr_at_step: step must be >= 1");
  if (warmup < 1) throw std::invalid_argument("lr_at_step: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return base * std::sqrt(w) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

Tensor label_smoothed_xent(const Tensor& logits, const std::vector<int>& labels,
                           double smoothing) {
  if (!logits.defined() || logits.shape().size() != 2)
    throw std::invalid_argument("label_smoothed_xent: logits must be [vocab x positions]");
  const std::int64_t V = logits.shape()[0];
  const std::int64_t n = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("label_smoothed_xent: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " positions");
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw std::invalid_argument("label_smoothed_xent: smoothing must lie in [0, 1)");
  if (V < 2) throw std::invalid_argument("label_smoothed_xent: vocab must be >= 2");

  std::int64_t used = 0;
  for (int y : labels) {
    if (y == kPadId) continue;
    if (y < 0 || y >= V)
      throw std::invalid_argument("label_smoothed_xent: label " + std::to_string(y) +
                                  " outside vocab of size " + std::to_string(V));
    ++used;
  }
  if (used == 0)
    throw std::invalid_argument("label_smoothed_xent: all positions are padding");

  const auto& l = logits.data();
  const double off = smoothing / static_cast<double>(V - 1);
  const double on = 1.0 - smoothing;

  // probs are kept for the backward pass
  std::vector<double> probs(l.size(), 0.0);
  double total = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    if (labels[static_cast<std::size_t>(j)] == kPadId) continue;
    double mx = l[static_cast<std::size_t>(j)];
    for (std::int64_t i = 1; i < V; ++i)
      mx = std::max(mx, l[static_cast<std::size_t>(i * n + j)]);
    double denom = 0.0;
    for (std::int64_t i = 0; i < V; ++i)
      denom += std::exp(l[static_cast<std::size_t>(i * n + j)] - mx);
    const double lse = mx + std::log(denom);
    double dot = 0.0;
    for (std::int64_t i = 0; i < V; ++i) {
      const double lij = l[static_cast<std::size_t>(i * n + j)];
      probs[static_cast<std::size_t>(i * n + j)] = std::exp(lij - lse);
      dot += (i == labels[static_cast<std::size_t>(j)] ? on : off) * lij;
    }
    total += lse - dot;
  }

  const double inv_used = 1.0 / static_cast<double>(used);
  return Tensor::make_op(
      {}, {total * inv_used}, {logits},
      [labels, on, off, inv_used, V, n, probs = std::move(probs)](detail::Node& self) {
        const double g = self.grad[0];
        auto& dl = self.parents[0]->grad_buf();
        for (std::int64_t j = 0; j < n; ++j) {
          const int y = labels[static_cast<std::size_t>(j)];
          if (y == kPadId) continue;
          for (std::int64_t i = 0; i < V; ++i) {
            const double q = (i == y ? on : off);
            dl[static_cast<std::size_t>(i * n + j)] +=
                g * (probs[static_cast<std::size_t>(i * n + j)] - q) * inv_used;
          }
        }
      });
}

AdamState init_adam(const ModelParams& params, const ModelConfig& cfg) {
  AdamState s;
  visit_params(params, cfg, [&](const std::string&, const Tensor& t) {
    s.m.emplace_back(t.data().size(), 0.0);
    s.v.emplace_back(t.data().size(), 0.0);
  });
  return s;
}

double global_grad_norm(const ModelParams& params, const ModelConfig& cfg) {
  double sq = 0.0;
  visit_params(params, cfg, [&](const std::string&, const Tensor& t) {
    if (!t.has_grad()) return;
    for (double g : t.grad()) sq += g * g;
  });
  return std::sqrt(sq);
}

void adam_step(ModelParams& params, const ModelConfig& cfg, AdamState& state,
               const OptimConfig& opt, double lr, double grad_scale) {
  std::size_t count = 0;
  visit_params(params, cfg, [&](const std::string&, const Tensor&) { ++count; });
  if (state.m.size() != count || state.v.size() != count)
    throw std::invalid_argument("adam state holds " + std::to_string(state.m.size()) +
                                " slots for " + std::to_string(count) + " parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));

  std::size_t idx = 0;
  visit_params(params, cfg, [&](const std::string& name, const Shape&, ParamKind, Tensor& t) {
    auto& value = t.raw_data();
    auto& m = state.m[idx];
    auto& v = state.v[idx];
    const bool has_grad = t.has_grad();
    const std::vector<double>* grad = has_grad ? &t.grad() : nullptr;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = (grad ? (*grad)[i] : 0.0) * grad_scale;
      if (!std::isfinite(g))
        throw std::runtime_error("non-finite gradient in \"" + name + "\" at index " +
                                 std::to_string(i));
      value[i] -= lr * opt.weight_decay * value[i];
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
      value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.eps);
      if (!std::isfinite(value[i]))
        throw std::runtime_error("non-finite parameter value in \"" + name + "\" at index " +
                                 std::to_string(i));
    }
    ++idx;
  });
}

std::vector<std::vector<std::size_t>> plan_batches(const std::vector<EncodedPair>& pairs,
                                                   std::int64_t batch_tokens) {
  if (batch_tokens < 1) throw std::invalid_argument("plan_batches: batch_tokens must be >= 1");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pairs[a].tgt.size() != pairs[b].tgt.size()) return pairs[a].tgt.size() < pairs[b].tgt.size();
    if (pairs[a].src.size() != pairs[b].src.size()) return pairs[a].src.size() < pairs[b].src.size();
    return a < b;
  });

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::int64_t cur_tokens = 0;
  for (std::size_t i : order) {
    const std::int64_t cost = static_cast<std::int64_t>(pairs[i].tgt.size()) + 1;
    if (!cur.empty() && cur_tokens + cost > batch_tokens) {
      batches.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(i);
    cur_tokens += cost;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

namespace {

std::vector<std::vector<double>> snapshot_params(const ModelParams& params,
                                                 const ModelConfig& cfg) {
  std::vector<std::vector<double>> snap;
  visit_params(params, cfg, [&](const std::string&, const Tensor& t) { snap.push_back(t.data()); });
  return snap;
}

void restore_params(ModelParams& params, const ModelConfig& cfg,
                    const std::vector<std::vector<double>>& snap) {
  std::size_t idx = 0;
  visit_params(params, cfg, [&](const std::string&, const Shape&, ParamKind, Tensor& t) {
    t.raw_data() = snap[idx++];
  });
}

void zero_all_grads(ModelParams& params, const ModelConfig& cfg) {
  visit_params(params, cfg,
               [&](const std::string&, const Shape&, ParamKind, Tensor& t) { t.zero_grad(); });
}

}  // namespace

TrainResult train(ModelParams& params, const ModelConfig& cfg, AdamState& adam,
                  const std::vector<EncodedPair>& pairs, const TrainConfig& tc,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train: empty corpus");
  if (tc.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");

  const auto batches = plan_batches(pairs, tc.batch_tokens);
  Rng dropout_rng(derive_seed(tc.seed, 0xd7a9));

  TrainResult result;
  result.steps = adam.step;
  for (std::int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto snapshot = snapshot_params(params, cfg);
    const AdamState adam_snapshot = adam;

    std::vector<std::size_t> batch_order(batches.size());
    std::iota(batch_order.begin(), batch_order.end(), std::size_t{0});
    Rng order_rng(derive_seed(tc.seed, 0xe0c0 + static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(batch_order);

    double epoch_loss = 0.0;
    std::int64_t epoch_tokens = 0;
    std::int64_t epoch_correct = 0;
    double last_lr = 0.0;
    bool bad = false;

    for (std::size_t b : batch_order) {
      const auto& batch = batches[b];
      std::int64_t batch_tokens = 0;
      for (std::size_t s : batch)
        batch_tokens += static_cast<std::int64_t>(pairs[s].tgt.size()) + 1;

      zero_all_grads(params, cfg);
      double batch_loss = 0.0;
      try {
        for (std::size_t s : batch) {
          const std::vector<int> src = to_source_ids(pairs[s].src);
          const std::vector<int> tgt_in = to_decoder_input(pairs[s].tgt);
          const std::vector<int> labels = to_labels(pairs[s].tgt);
          const double weight =
              static_cast<double>(labels.size()) / static_cast<double>(batch_tokens);

          Graph g;
          {
            Graph::Scope scope(g);
            ForwardResult fwd = forward(params, cfg, src, tgt_in, RunMode::train, &dropout_rng);
            Tensor loss = label_smoothed_xent(fwd.logits, labels, tc.label_smoothing);
            Tensor weighted = scale(loss, weight);
            backward(weighted);
            batch_loss += weighted.item();
            epoch_loss += loss.item() * static_cast<double>(labels.size());

            const auto& lv = fwd.logits.data();
            const std::int64_t V = fwd.logits.shape()[0];
            const std::int64_t n = fwd.logits.shape()[1];
            for (std::int64_t j = 0; j < n; ++j) {
              std::int64_t best = 0;
              for (std::int64_t i = 1; i < V; ++i)
                if (lv[static_cast<std::size_t>(i * n + j)] >
                    lv[static_cast<std::size_t>(best * n + j)])
                  best = i;
              if (best == labels[static_cast<std::size_t>(j)]) ++epoch_correct;
            }
            epoch_tokens += n;
          }
        }

        if (!std::isfinite(batch_loss)) {
          bad = true;
          break;
        }
        double scale_g = 1.0;
        if (tc.optim.clip_norm > 0.0) {
          const double norm = global_grad_norm(params, cfg);
          if (!std::isfinite(norm)) {
            bad = true;
            break;
          }
          if (norm > tc.optim.clip_norm) scale_g = tc.optim.clip_norm / norm;
        }
        last_lr = lr_at_step(adam.step + 1, tc.optim.base_lr, tc.optim.warmup);
        adam_step(params, cfg, adam, tc.optim, last_lr, scale_g);
      } catch (const std::runtime_error&) {
        // numeric blowup somewhere in the batch: roll back below
        bad = true;
        break;
      }
    }

    if (bad) {
      restore_params(params, cfg, snapshot);
      adam = adam_snapshot;
      result.diverged = true;
      break;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.step = adam.step;
    stats.loss = epoch_loss / static_cast<double>(epoch_tokens);
    stats.token_accuracy =
        static_cast<double>(epoch_correct) / static_cast<double>(epoch_tokens);
    stats.lr = last_lr;
    result.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  result.steps = adam.step;
  return result;
}

}  // namespace attnlink
