#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "attnlink/data.hpp"
#include "attnlink/model.hpp"

// Per-sentence autograd training with token-weighted batching, label
// smoothing, warmup learning rate and decoupled weight decay Adam.

namespace attnlink {

// Inverse square root schedule, scaled so the peak (reached at step ==
// warmup) equals base: base * sqrt(warmup) * min(step^-1/2, step * warmup^-3/2).
double lr_at_step(std::int64_t step, double base, std::int64_t warmup);

// Mean over non-pad label positions of cross entropy against the smoothed
// target (1 - s on the label, s/(V-1) elsewhere). Scalar; gradients flow to
// the logits in closed form.
Tensor label_smoothed_xent(const Tensor& logits, const std::vector<int>& labels,
                           double smoothing);

struct OptimConfig {
  double base_lr = 5e-4;
  std::int64_t warmup = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // global gradient norm cap; 0 disables clipping
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;  // aligned with visit_params order
  std::vector<std::vector<double>> v;
};

AdamState init_adam(const ModelParams& params, const ModelConfig& cfg);

double global_grad_norm(const ModelParams& params, const ModelConfig& cfg);

// One AdamW update from the accumulated gradients, each gradient multiplied
// by grad_scale on the way in (used for norm clipping). Throws
// std::runtime_error naming the parameter on non-finite input.
void adam_step(ModelParams& params, const ModelConfig& cfg, AdamState& state,
               const OptimConfig& opt, double lr, double grad_scale = 1.0);

struct TrainConfig {
  std::int64_t epochs = 10;
  std::int64_t batch_tokens = 512;  // cap on the sum of (target len + 1)
  double label_smoothing = 0.1;
  OptimConfig optim;
  std::uint64_t seed = 1;
};

struct EpochStats {
  std::int64_t epoch = 0;  // 1-based
  std::int64_t step = 0;   // optimizer steps taken so far
  double loss = 0.0;       // token-weighted smoothed cross entropy
  double token_accuracy = 0.0;
  double lr = 0.0;  // learning rate of the last step in the epoch
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::int64_t steps = 0;
  bool diverged = false;  // params rolled back to the last finished epoch
};

// Groups sentence indices so each batch stays within batch_tokens, ordered by
// target length then source length then index. An over-long sentence gets a
// batch of its own.
std::vector<std::vector<std::size_t>> plan_batches(const std::vector<EncodedPair>& pairs,
                                                   std::int64_t batch_tokens);

// Batch order is reshuffled per epoch from the train seed; dropout draws come
// from a dedicated stream. Identical inputs and seeds give identical runs.
TrainResult train(ModelParams& params, const ModelConfig& cfg, AdamState& adam,
                  const std::vector<EncodedPair>& pairs, const TrainConfig& tc,
                  const std::function<void(const EpochStats&)>& on_epoch = nullptr);

}  // namespace attnlink
