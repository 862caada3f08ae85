#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnlink/theory.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace attnlink;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.d_q = c.d_k = c.d_v = 8;
  c.d_hidden = 16;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.placement = LinkPlacement::both;
  c.dropout = 0.0;
  c.src_vocab = 9;
  c.tgt_vocab = 9;
  c.max_seq_len = 32;
  return c;
}

double stddev(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("[TRIVIAL] sim config validation names every offender") {
  SimConfig c;
  c.n = 0;
  c.sigma0 = -1.0;
  c.trials = 0;
  c.gamma_std = -0.5;
  try {
    c.validate();
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("n must") != std::string::npos);
    CHECK(msg.find("sigma0") != std::string::npos);
    CHECK(msg.find("trials") != std::string::npos);
    CHECK(msg.find("gamma_std") != std::string::npos);
  }
  CHECK_THROWS_AS(simulate_robustness(c), std::invalid_argument);
  CHECK(to_string(GammaMode::sampled) == "sampled");
  CHECK(gamma_mode_from_string("zero") == GammaMode::zero);
  CHECK_THROWS_AS(gamma_mode_from_string("half"), std::invalid_argument);
}

TEST_CASE("[TRIVIAL] zero noise gives exactly zero error and an undefined ratio") {
  SimConfig c;
  c.n = 8;
  c.sigma0 = 0.0;
  c.trials = 50;
  c.seed = 3;
  RobustnessReport r = simulate_robustness(c);
  CHECK(r.mse_vanilla == 0.0);
  CHECK(r.mse_linked == 0.0);
  CHECK(r.mean_abs_vanilla == 0.0);
  CHECK(r.mean_abs_linked == 0.0);
  CHECK(r.est16 == 0.0);
  CHECK(r.est17 == 0.0);
  CHECK_FALSE(r.ratio.has_value());
  CHECK(r.bound10 > 0.0);  // the x-energy half survives
  CHECK(r.bound10 == r.bound15);
}

TEST_CASE("[DERIVED] single-element trials match hand recomputation of the draw stream") {
  SimConfig c;
  c.n = 1;
  c.sigma0 = 0.4;
  c.trials = 25;
  c.seed = 77;
  std::vector<TrialStats> seen;
  simulate_robustness(c, [&](std::int64_t, const TrialStats& t) { seen.push_back(t); });
  REQUIRE(seen.size() == 25);
  for (std::int64_t trial = 0; trial < 25; ++trial) {
    // With n = 1 the softmax collapses to P = [1], so y = x, the vanilla
    // output is x(1 + sigma) and the linked one x(1 + (sigma+sigma_pre)/2).
    Rng rng(derive_seed(c.seed, static_cast<std::uint64_t>(trial)));
    const double x = rng.normal();
    (void)rng.normal();  // the ground-truth logit draw
    const double s = rng.normal(0.0, c.sigma0);
    const double sp = rng.normal(0.0, c.sigma0);
    const TrialStats& t = seen[static_cast<std::size_t>(trial)];
    CHECK(t.mse_vanilla == doctest::Approx(x * x * s * s).epsilon(1e-12));
    CHECK(t.mse_linked ==
          doctest::Approx(x * x * 0.25 * (s + sp) * (s + sp)).epsilon(1e-12));
    CHECK(t.mean_abs_vanilla == doctest::Approx(std::abs(x * s)).epsilon(1e-12));
    const double mix2 = 0.25 * (s + sp) * (s + sp);
    CHECK(t.est16 == doctest::Approx(s * s).epsilon(1e-12));
    CHECK(t.est17 == doctest::Approx(mix2).epsilon(1e-12));
    CHECK(t.bound10 == doctest::Approx(0.5 * x * x + s * s).epsilon(1e-12));
    CHECK(t.bound15 == doctest::Approx(0.5 * x * x + mix2).epsilon(1e-12));
  }
}

TEST_CASE("[DERIVED] full trial pipeline matches an independent n=2 oracle") {
  SimConfig c;
  c.n = 2;
  c.sigma0 = 0.25;
  c.trials = 10;
  c.seed = 5;
  for (bool normalize : {false, true}) {
    c.normalize = normalize;
    CAPTURE(normalize);
    std::vector<TrialStats> seen;
    simulate_robustness(c, [&](std::int64_t, const TrialStats& t) { seen.push_back(t); });
    for (std::int64_t trial = 0; trial < c.trials; ++trial) {
      Rng rng(derive_seed(c.seed, static_cast<std::uint64_t>(trial)));
      double x[2], g[4], s[4], sp[4], p[4];
      for (double& v : x) v = rng.normal();
      for (double& v : g) v = rng.normal();
      for (double& v : s) v = rng.normal(0.0, c.sigma0);
      for (double& v : sp) v = rng.normal(0.0, c.sigma0);
      for (int j = 0; j < 2; ++j) {
        const double mx = std::max(g[j], g[2 + j]);
        const double den = std::exp(g[j] - mx) + std::exp(g[2 + j] - mx);
        p[j] = std::exp(g[j] - mx) / den;
        p[2 + j] = std::exp(g[2 + j] - mx) / den;
      }
      double mse_v = 0.0, mse_l = 0.0, abs_v = 0.0, abs_l = 0.0;
      for (int j = 0; j < 2; ++j) {
        const double y = x[0] * p[j] + x[1] * p[2 + j];
        double yv = x[0] * (p[j] + s[j]) + x[1] * (p[2 + j] + s[2 + j]);
        double yl = x[0] * (p[j] + 0.5 * (s[j] + sp[j])) +
                    x[1] * (p[2 + j] + 0.5 * (s[2 + j] + sp[2 + j]));
        if (normalize) {
          yv /= p[j] + s[j] + p[2 + j] + s[2 + j];
          yl /= p[j] + p[2 + j] + 0.5 * (s[j] + sp[j]) + 0.5 * (s[2 + j] + sp[2 + j]);
        }
        mse_v += 0.5 * (y - yv) * (y - yv);
        mse_l += 0.5 * (y - yl) * (y - yl);
        abs_v += 0.5 * std::abs(y - yv);
        abs_l += 0.5 * std::abs(y - yl);
      }
      double s2 = 0.0, mix2 = 0.0, x2 = x[0] * x[0] + x[1] * x[1];
      for (int k = 0; k < 4; ++k) {
        s2 += s[k] * s[k];
        mix2 += 0.25 * (s[k] + sp[k]) * (s[k] + sp[k]);
      }
      const TrialStats& t = seen[static_cast<std::size_t>(trial)];
      CHECK(t.mse_vanilla == doctest::Approx(mse_v).epsilon(1e-12));
      CHECK(t.mse_linked == doctest::Approx(mse_l).epsilon(1e-12));
      CHECK(t.mean_abs_vanilla == doctest::Approx(abs_v).epsilon(1e-12));
      CHECK(t.mean_abs_linked == doctest::Approx(abs_l).epsilon(1e-12));
      CHECK(t.bound10 == doctest::Approx(0.5 * x2 + 0.5 * s2).epsilon(1e-12));
      CHECK(t.bound15 == doctest::Approx(0.5 * x2 + 0.5 * mix2).epsilon(1e-12));
      CHECK(t.est16 == doctest::Approx(0.5 * s2).epsilon(1e-12));
      CHECK(t.est17 == doctest::Approx(0.5 * mix2).epsilon(1e-12));
    }
  }
}

TEST_CASE("[THEORY] the linked error halves: ratio near one half, energy near N sigma0^2") {
  SimConfig c;
  c.n = 16;
  c.sigma0 = 0.1;
  c.trials = 20000;
  c.seed = 2026;
  RobustnessReport r = simulate_robustness(c);
  REQUIRE(r.ratio.has_value());
  CHECK(*r.ratio > 0.48);
  CHECK(*r.ratio < 0.52);
  // Noise-energy estimators: expectations N sigma0^2 and half that.
  CHECK(r.est16 == doctest::Approx(16 * 0.01).epsilon(0.03));
  CHECK(r.est17 == doctest::Approx(8 * 0.01).epsilon(0.03));
  CHECK(r.est17 / r.est16 == doctest::Approx(0.5).epsilon(0.02));
  // Mean absolute error scales with the noise std, so it shrinks by sqrt(2).
  CHECK(r.mean_abs_linked < r.mean_abs_vanilla);
  CHECK(r.mean_abs_linked / r.mean_abs_vanilla == doctest::Approx(std::sqrt(0.5)).epsilon(0.03));

  RobustnessReport again = simulate_robustness(c);
  CHECK(again.mse_vanilla == r.mse_vanilla);
  CHECK(again.mse_linked == r.mse_linked);
  CHECK(*again.ratio == *r.ratio);
  CHECK(again.bound10 == r.bound10);
  CHECK(again.est17 == r.est17);
}

TEST_CASE("[DERIVED] per-trial error means never exceed the averaged bounds") {
  SimConfig c;
  c.n = 8;
  c.sigma0 = 0.3;
  c.trials = 500;
  c.seed = 12;
  std::int64_t checked = 0;
  simulate_robustness(c, [&](std::int64_t, const TrialStats& t) {
    ++checked;
    CHECK(t.mean_abs_vanilla <= t.bound10 + 1e-12);
    CHECK(t.mean_abs_linked <= t.bound15 + 1e-12);
  });
  CHECK(checked == 500);
}

TEST_CASE("[DERIVED] monte carlo spread shrinks when trials quadruple") {
  SimConfig c;
  c.n = 16;
  c.sigma0 = 0.1;
  std::vector<double> small_t, large_t;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    c.seed = seed;
    c.trials = 150;
    small_t.push_back(*simulate_robustness(c).ratio);
    c.trials = 600;
    large_t.push_back(*simulate_robustness(c).ratio);
  }
  for (double r : small_t) CHECK(r == doctest::Approx(0.5).epsilon(0.12));
  for (double r : large_t) CHECK(r == doctest::Approx(0.5).epsilon(0.06));
  CHECK(stddev(large_t) < stddev(small_t));
}

TEST_CASE("[DERIVED] normalization and layer drift move the estimate the expected way") {
  // The c ~ 1 regime needs sqrt(n) * sigma0 << 1, otherwise renormalizing by
  // a near-zero perturbed column mass dominates the vanilla error.
  SimConfig c;
  c.n = 16;
  c.sigma0 = 0.01;
  c.trials = 3000;
  c.seed = 8;
  c.normalize = true;
  RobustnessReport with_norm = simulate_robustness(c);
  REQUIRE(with_norm.ratio.has_value());
  CHECK(*with_norm.ratio == doctest::Approx(0.5).epsilon(0.1));

  // Ground-truth drift between layers is a systematic error for the linked
  // model only, so it pushes the ratio up.
  c.n = 32;
  c.sigma0 = 0.05;
  c.normalize = false;
  RobustnessReport still = simulate_robustness(c);
  c.gamma_mode = GammaMode::sampled;
  c.gamma_std = 2.0;
  RobustnessReport drifted = simulate_robustness(c);
  REQUIRE(drifted.ratio.has_value());
  CHECK(*drifted.ratio > *still.ratio);

  // Drift alone breaks the linked model but not the vanilla one.
  c.sigma0 = 0.0;
  RobustnessReport drift_only = simulate_robustness(c);
  CHECK(drift_only.mse_vanilla == 0.0);
  CHECK(drift_only.mse_linked > 0.0);
  CHECK_FALSE(drift_only.ratio.has_value());
}

TEST_CASE("[TRIVIAL] report json carries the config and a nullable ratio") {
  SimConfig c;
  c.n = 4;
  c.sigma0 = 0.0;
  c.trials = 3;
  c.seed = 9;
  nlohmann::json j = nlohmann::json::parse(report_to_json(simulate_robustness(c)));
  CHECK(j["config"]["n"] == 4);
  CHECK(j["config"]["gamma_mode"] == "zero");
  CHECK(j["ratio"].is_null());
  CHECK(j["mse_vanilla"] == 0.0);
  CHECK(j.contains("bound15"));
  CHECK(j.contains("est17"));

  c.sigma0 = 0.1;
  nlohmann::json j2 = nlohmann::json::parse(report_to_json(simulate_robustness(c)));
  CHECK(j2["ratio"].is_number());
  CHECK(j2["config"]["sigma0"] == 0.1);
}

TEST_CASE("[TRIVIAL] lemma1 witness collapses for inert links and fires for active ones") {
  ModelConfig c = tiny_config();
  Lemma1Report rep = lemma1_check(c, 31, 4);
  CHECK(rep.lambda_zero <= 1e-12);
  CHECK(rep.zeroed_link <= 1e-12);
  CHECK(rep.active_link > 1e-9);

  // The check promotes an unlinked base so the active mode means something.
  ModelConfig plain = tiny_config();
  plain.placement = LinkPlacement::none;
  plain.link_lambda = 0.0;
  Lemma1Report promoted = lemma1_check(plain, 31, 4);
  CHECK(promoted.lambda_zero <= 1e-12);
  CHECK(promoted.active_link > 1e-9);

  // Witness values are reproducible and respect n_inputs validation.
  CHECK(lemma1_witness(c, 31, 4) == lemma1_witness(c, 31, 4));
  CHECK_THROWS_AS(lemma1_witness(c, 31, 0), std::invalid_argument);

  ModelConfig lam0 = tiny_config();
  lam0.link_lambda = 0.0;
  CHECK(lemma1_witness(lam0, 7, 3) <= 1e-12);
  ModelConfig zeroed = tiny_config();
  zeroed.zero_link_logits = true;
  CHECK(lemma1_witness(zeroed, 7, 3) <= 1e-12);
}
