#include "attnlink/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "attnlink/vocab_ids.hpp"

namespace attnlink {

namespace {

// Column softmax of an [n x n] row-major logit matrix: each column becomes a
// distribution over the row index, matching the model's stochasticity
// constraint sum_i P(i,j) = 1.
std::vector<double> column_softmax(const std::vector<double>& logits, std::int64_t n) {
  std::vector<double> p(logits.size());
  for (std::int64_t j = 0; j < n; ++j) {
    double mx = logits[static_cast<std::size_t>(j)];
    for (std::int64_t i = 1; i < n; ++i)
      mx = std::max(mx, logits[static_cast<std::size_t>(i * n + j)]);
    double denom = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      denom += std::exp(logits[static_cast<std::size_t>(i * n + j)] - mx);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::size_t k = static_cast<std::size_t>(i * n + j);
      p[k] = std::exp(logits[k] - mx) / denom;
    }
  }
  return p;
}

}  // namespace

std::string to_string(GammaMode m) {
  return m == GammaMode::zero ? "zero" : "sampled";
}

GammaMode gamma_mode_from_string(const std::string& s) {
  if (s == "zero") return GammaMode::zero;
  if (s == "sampled") return GammaMode::sampled;
  throw std::invalid_argument("unknown gamma mode: " + s);
}

void SimConfig::validate() const {
  std::string bad;
  auto flag = [&](const std::string& msg) {
    if (!bad.empty()) bad += "; ";
    bad += msg;
  };
  if (n < 1) flag("n must be at least 1");
  if (!(sigma0 >= 0.0) || !std::isfinite(sigma0)) flag("sigma0 must be finite and nonnegative");
  if (trials < 1) flag("trials must be at least 1");
  if (!(gamma_std >= 0.0) || !std::isfinite(gamma_std))
    flag("gamma_std must be finite and nonnegative");
  if (!bad.empty()) throw std::invalid_argument("SimConfig: " + bad);
}

RobustnessReport simulate_robustness(
    const SimConfig& cfg,
    const std::function<void(std::int64_t trial, const TrialStats&)>& on_trial) {
  cfg.validate();
  const std::int64_t n = cfg.n;
  const std::size_t nn = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  const double inv_n = 1.0 / static_cast<double>(n);

  RobustnessReport rep;
  rep.config = cfg;
  std::vector<double> x(static_cast<std::size_t>(n));
  std::vector<double> logits(nn), sigma(nn), sigma_pre(nn);
  std::vector<double> p, p_pre;

  for (std::int64_t trial = 0; trial < cfg.trials; ++trial) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    for (double& v : x) v = rng.normal();
    for (double& v : logits) v = rng.normal();
    p = column_softmax(logits, n);
    if (cfg.gamma_mode == GammaMode::sampled) {
      p_pre = logits;  // reuse as scratch for drifted logits
      for (double& v : p_pre) v += rng.normal(0.0, cfg.gamma_std);
      p_pre = column_softmax(p_pre, n);
    } else {
      p_pre = p;
    }
    for (double& v : sigma) v = rng.normal(0.0, cfg.sigma0);
    for (double& v : sigma_pre) v = rng.normal(0.0, cfg.sigma0);

    TrialStats t;
    double sum_x2 = 0.0;
    for (double v : x) sum_x2 += v * v;
    double sum_s2 = 0.0, sum_mix2 = 0.0;
    for (std::size_t k = 0; k < nn; ++k) {
      const double mix = 0.5 * sigma[k] + 0.5 * sigma_pre[k];
      sum_s2 += sigma[k] * sigma[k];
      sum_mix2 += mix * mix;
    }
    t.bound10 = 0.5 * sum_x2 + inv_n * sum_s2;
    t.bound15 = 0.5 * sum_x2 + inv_n * sum_mix2;
    t.est16 = inv_n * sum_s2;
    t.est17 = inv_n * sum_mix2;

    for (std::int64_t j = 0; j < n; ++j) {
      double y = 0.0, yv = 0.0, yl = 0.0, cv = 0.0, cl = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t k = static_cast<std::size_t>(i * n + j);
        const double pv = p[k] + sigma[k];
        const double pl = 0.5 * p[k] + 0.5 * p_pre[k] + 0.5 * sigma[k] + 0.5 * sigma_pre[k];
        y += x[static_cast<std::size_t>(i)] * p[k];
        yv += x[static_cast<std::size_t>(i)] * pv;
        yl += x[static_cast<std::size_t>(i)] * pl;
        cv += pv;
        cl += pl;
      }
      if (cfg.normalize) {
        yv /= cv;
        yl /= cl;
      }
      t.mse_vanilla += (y - yv) * (y - yv) * inv_n;
      t.mse_linked += (y - yl) * (y - yl) * inv_n;
      t.mean_abs_vanilla += std::abs(y - yv) * inv_n;
      t.mean_abs_linked += std::abs(y - yl) * inv_n;
    }

    if (on_trial) on_trial(trial, t);
    rep.mse_vanilla += t.mse_vanilla;
    rep.mse_linked += t.mse_linked;
    rep.mean_abs_vanilla += t.mean_abs_vanilla;
    rep.mean_abs_linked += t.mean_abs_linked;
    rep.bound10 += t.bound10;
    rep.bound15 += t.bound15;
    rep.est16 += t.est16;
    rep.est17 += t.est17;
  }

  const double inv_t = 1.0 / static_cast<double>(cfg.trials);
  rep.mse_vanilla *= inv_t;
  rep.mse_linked *= inv_t;
  rep.mean_abs_vanilla *= inv_t;
  rep.mean_abs_linked *= inv_t;
  rep.bound10 *= inv_t;
  rep.bound15 *= inv_t;
  rep.est16 *= inv_t;
  rep.est17 *= inv_t;
  if (rep.mse_vanilla > 0.0) rep.ratio = rep.mse_linked / rep.mse_vanilla;
  return rep;
}

std::string report_to_json(const RobustnessReport& report) {
  nlohmann::json j;
  j["config"] = {{"n", report.config.n},
                 {"sigma0", report.config.sigma0},
                 {"trials", report.config.trials},
                 {"seed", report.config.seed},
                 {"normalize", report.config.normalize},
                 {"gamma_mode", to_string(report.config.gamma_mode)},
                 {"gamma_std", report.config.gamma_std}};
  j["mse_vanilla"] = report.mse_vanilla;
  j["mse_linked"] = report.mse_linked;
  if (report.ratio)
    j["ratio"] = *report.ratio;
  else
    j["ratio"] = nullptr;
  j["mean_abs_vanilla"] = report.mean_abs_vanilla;
  j["mean_abs_linked"] = report.mean_abs_linked;
  j["bound10"] = report.bound10;
  j["bound15"] = report.bound15;
  j["est16"] = report.est16;
  j["est17"] = report.est17;
  return j.dump(2);
}

double lemma1_witness(const ModelConfig& cfg, std::uint64_t seed, std::int64_t n_inputs) {
  cfg.validate();
  if (n_inputs < 1) throw std::invalid_argument("lemma1_witness: n_inputs must be at least 1");
  ModelConfig plain = cfg;
  plain.placement = LinkPlacement::none;
  plain.zero_link_logits = false;
  // Both layouts are placement-independent, so one draw serves both models.
  ModelParams params = init_params(cfg, seed);

  Rng rng(derive_seed(seed, 0x11));
  const std::int64_t max_len = std::min<std::int64_t>(cfg.max_seq_len - 1, 10);
  double worst = 0.0;
  for (std::int64_t k = 0; k < n_inputs; ++k) {
    std::vector<int> src(static_cast<std::size_t>(1 + rng.uniform_int(max_len)));
    std::vector<int> tgt_in(static_cast<std::size_t>(1 + rng.uniform_int(max_len)));
    for (int& id : src)
      id = static_cast<int>(kReservedIds + rng.uniform_int(cfg.src_vocab - kReservedIds));
    tgt_in[0] = kBosId;
    for (std::size_t i = 1; i < tgt_in.size(); ++i)
      tgt_in[i] = static_cast<int>(kReservedIds + rng.uniform_int(cfg.tgt_vocab - kReservedIds));

    ForwardResult a = forward(params, cfg, src, tgt_in, RunMode::eval);
    ForwardResult b = forward(params, plain, src, tgt_in, RunMode::eval);
    const std::vector<double>& va = a.logits.data();
    const std::vector<double>& vb = b.logits.data();
    for (std::size_t i = 0; i < va.size(); ++i)
      worst = std::max(worst, std::abs(va[i] - vb[i]));
  }
  return worst;
}

Lemma1Report lemma1_check(const ModelConfig& base, std::uint64_t seed, std::int64_t n_inputs) {
  ModelConfig cfg = base;
  if (cfg.placement == LinkPlacement::none) cfg.placement = LinkPlacement::both;
  if (cfg.link_lambda == 0.0) cfg.link_lambda = 1.0;
  cfg.zero_link_logits = false;

  Lemma1Report rep;
  ModelConfig mode = cfg;
  mode.link_lambda = 0.0;
  rep.lambda_zero = lemma1_witness(mode, seed, n_inputs);
  mode = cfg;
  mode.zero_link_logits = true;
  rep.zeroed_link = lemma1_witness(mode, seed, n_inputs);
  rep.active_link = lemma1_witness(cfg, seed, n_inputs);
  return rep;
}

}  // namespace attnlink
