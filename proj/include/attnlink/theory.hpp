#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "attnlink/model.hpp"

// Monte Carlo check of the one-layer error model behind the link: the layer
// is y(j) = sum_i x(i) P(i,j) with P column-stochastic. Low-resource noise
// perturbs P additively; the linked layer averages two independently
// perturbed copies, halving the noise variance, so the linked/vanilla mean
// squared error ratio converges to 1/2.

namespace attnlink {

enum class GammaMode { zero, sampled };

std::string to_string(GammaMode m);
GammaMode gamma_mode_from_string(const std::string& s);

struct SimConfig {
  std::int64_t n = 64;        // vector length
  double sigma0 = 0.05;       // perturbation std dev
  std::int64_t trials = 1000;
  std::uint64_t seed = 1;
  bool normalize = false;     // re-divide by the perturbed column mass
  GammaMode gamma_mode = GammaMode::zero;
  double gamma_std = 0.0;     // logit-space drift between adjacent layers

  void validate() const;  // throws std::invalid_argument naming every offender
};

// Per-trial means over j. bound10/bound15 are the empirical right-hand sides
// of the two averaged AM-GM bounds; est16/est17 the noise-energy estimators
// whose expectations are N sigma0^2 and N sigma0^2 / 2.
struct TrialStats {
  double mse_vanilla = 0.0;
  double mse_linked = 0.0;
  double mean_abs_vanilla = 0.0;
  double mean_abs_linked = 0.0;
  double bound10 = 0.0;
  double bound15 = 0.0;
  double est16 = 0.0;
  double est17 = 0.0;
};

struct RobustnessReport {
  SimConfig config;
  double mse_vanilla = 0.0;  // mean over trials and j of (y - y_vanilla)^2
  double mse_linked = 0.0;
  std::optional<double> ratio;  // mse_linked / mse_vanilla when defined
  double mean_abs_vanilla = 0.0;
  double mean_abs_linked = 0.0;
  double bound10 = 0.0;
  double bound15 = 0.0;
  double est16 = 0.0;
  double est17 = 0.0;
};

// Each trial draws, in order: x (n normals), ground-truth logits (n^2), the
// adjacent-layer logit drift when sampled (n^2), then the two noise fields
// (n^2 each), all from a stream derived from (seed, trial). Trials are
// independent, so the report is identical however they are scheduled.
RobustnessReport simulate_robustness(
    const SimConfig& cfg,
    const std::function<void(std::int64_t trial, const TrialStats&)>& on_trial = nullptr);

std::string report_to_json(const RobustnessReport& report);

// Max abs logit difference between the model as configured and its unlinked
// twin (placement none) with bit-identical parameters, over n_inputs random
// sentence pairs. Zero lambda or zeroed link logits must collapse to the
// twin; an active link generally must not.
double lemma1_witness(const ModelConfig& cfg, std::uint64_t seed, std::int64_t n_inputs);

struct Lemma1Report {
  double lambda_zero = 0.0;        // link weight 0
  double zeroed_link = 0.0;        // active weight, link input forced to zero
  double active_link = 0.0;        // as configured; nonzero when the link acts
};

// Runs lemma1_witness in the three canonical modes on top of base (base's own
// lambda and placement are used for the active mode; placement none is
// promoted to both so the link has something to do).
Lemma1Report lemma1_check(const ModelConfig& base, std::uint64_t seed, std::int64_t n_inputs);

}  // namespace attnlink
