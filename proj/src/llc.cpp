#include "icl/llc.hpp"

#include <cmath>
#include <numbers>

#include "icl/errors.hpp"

namespace icl {

void SGLDConfig::validate() const {
  if (!(step_size > 0)) throw ConfigError("llc.step_size must be > 0");
  if (!(localization >= 0)) throw ConfigError("llc.localization must be >= 0");
  if (!(nbeta > 0)) throw ConfigError("llc.nbeta must be > 0");
  if (minibatch < 1) throw ConfigError("llc.minibatch must be >= 1");
  if (chains < 1) throw ConfigError("llc.chains must be >= 1");
  if (draws < 1) throw ConfigError("llc.draws must be >= 1");
  if (burn_in < 0) throw ConfigError("llc.burn_in must be >= 0");
}

double QuadraticOracle::minibatch_loss(std::span<const double> w, int, Rng&,
                                       std::span<double> grad) const {
  double sq = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    sq += w[i] * w[i];
    grad[i] = curvature_ * w[i];
  }
  return 0.5 * curvature_ * sq;
}

double QuadraticOracle::reference_loss(std::span<const double> w, int) const {
  double sq = 0.0;
  for (double v : w) sq += v * v;
  return 0.5 * curvature_ * sq;
}

double FlatOracle::minibatch_loss(std::span<const double>, int, Rng&, std::span<double> grad) const {
  std::fill(grad.begin(), grad.end(), 0.0);
  return level_;
}

double LinearOracle::minibatch_loss(std::span<const double> w, int, Rng&,
                                    std::span<double> grad) const {
  for (std::size_t i = 0; i < w.size(); ++i) grad[i] = g_[static_cast<Eigen::Index>(i)];
  return reference_loss(w, 0);
}

double LinearOracle::reference_loss(std::span<const double> w, int) const {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += g_[static_cast<Eigen::Index>(i)] * w[i];
  return s;
}

TransformerOracle::TransformerOracle(ArchConfig arch, DataConfig data, TaskDiversity diversity)
    : model_(arch), data_(data), diversity_(diversity) {
  if (!diversity_.is_infinite()) {
    TaskPool pool(data_.pool_seed, data_.D);
    tasks_ = pool.prefix(diversity_.value());
  }
}

std::size_t TransformerOracle::dimension() const { return model_.layout().size(); }

Dataset TransformerOracle::sample(int minibatch, const Rng& rng) const {
  return sample_dataset(diversity_, static_cast<std::size_t>(minibatch), data_, tasks_, rng);
}

double TransformerOracle::minibatch_loss(std::span<const double> w, int minibatch, Rng& rng,
                                         std::span<double> grad) const {
  const std::vector<float> params(w.begin(), w.end());
  std::vector<float> g(params.size());
  const auto batch = make_batch<float>(sample(minibatch, Rng(rng.next_u64())));
  const double loss = model_.loss_and_grad(params, batch, g);
  std::copy(g.begin(), g.end(), grad.begin());
  return loss;
}

double TransformerOracle::reference_loss(std::span<const double> w, int minibatch) const {
  const std::vector<float> params(w.begin(), w.end());
  const Rng stream = Rng(data_.data_seed).derive("llc-reference");
  return model_.loss(params, make_batch<float>(sample(minibatch, stream)));
}

ChainTrace sgld_chain(std::span<const double> w_star, const LossOracle& oracle,
                      const SGLDConfig& cfg, Rng rng) {
  cfg.validate();
  const std::size_t d = w_star.size();
  if (oracle.dimension() != d) throw MalformedInput("oracle dimension does not match w*");
  ChainTrace trace;
  trace.seed = rng.key();
  const int steps = cfg.burn_in + cfg.draws;
  trace.losses.reserve(steps);
  trace.distances.reserve(steps);

  std::vector<double> w(w_star.begin(), w_star.end());
  std::vector<double> grad(d);
  Rng batch_rng = rng.derive("minibatch");
  Rng noise_rng = rng.derive("noise");
  const double half_eps = 0.5 * cfg.step_size;
  const double noise_sd = std::sqrt(cfg.step_size);
  double first_loss = 0.0;

  for (int tau = 0; tau < steps; ++tau) {
    const double loss = oracle.minibatch_loss(w, cfg.minibatch, batch_rng, grad);
    double dist2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) dist2 += (w[i] - w_star[i]) * (w[i] - w_star[i]);
    if (tau == 0) first_loss = loss;
    // Scale floored at 1 so a chain started at an exact zero of the loss is not flagged at once.
    const bool blown_up = std::abs(loss) > 1e6 * std::max(std::abs(first_loss), 1.0);
    if (!std::isfinite(loss) || !std::isfinite(dist2) || blown_up) {
      trace.diverged = true;
      break;
    }
    trace.losses.push_back(loss);
    trace.distances.push_back(std::sqrt(dist2));
    for (std::size_t i = 0; i < d; ++i) {
      const double drift = cfg.nbeta * grad[i] + cfg.localization * (w[i] - w_star[i]);
      w[i] -= half_eps * drift;
      if (!cfg.suppress_noise) w[i] += noise_sd * noise_rng.normal();
    }
  }
  return trace;
}

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_var(std::span<const double> v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

std::optional<double> geweke(std::span<const double> draws) {
  const std::size_t n = draws.size();
  const std::size_t n1 = n / 10;
  const std::size_t n2 = n / 2;
  if (n1 < 2 || n2 < 2) return std::nullopt;
  const auto first = draws.first(n1);
  const auto last = draws.last(n2);
  const double m1 = mean_of(first);
  const double m2 = mean_of(last);
  const double se2 = sample_var(first, m1) / n1 + sample_var(last, m2) / n2;
  if (!(se2 > 0) || !std::isfinite(se2)) return std::nullopt;
  return (m1 - m2) / std::sqrt(se2);
}

std::optional<double> rpd(std::span<const double> draws) {
  const std::size_t n = draws.size();
  const std::size_t n1 = n / 10;
  const std::size_t n2 = n / 2;
  if (n1 < 1 || n2 < 1) return std::nullopt;
  const double overall = mean_of(draws);
  double scale = 0.0;
  for (double x : draws) scale = std::max(scale, std::abs(x));
  if (!(std::abs(overall) > 1e-12 * scale)) return std::nullopt;
  return 100.0 * (mean_of(draws.last(n2)) - mean_of(draws.first(n1))) / overall;
}

std::optional<double> gelman_rubin(std::span<const std::vector<double>> chains) {
  if (chains.size() < 2) throw ConfigError("Gelman-Rubin needs at least two chains");
  const std::size_t n = chains.front().size();
  for (const auto& c : chains) {
    if (c.size() != n) throw ConfigError("Gelman-Rubin needs chains of equal length");
  }
  if (n < 2) throw ConfigError("Gelman-Rubin needs at least two draws per chain");
  const double m = static_cast<double>(chains.size());
  std::vector<double> means;
  double within = 0.0;
  for (const auto& c : chains) {
    const double mu = mean_of(c);
    means.push_back(mu);
    within += sample_var(c, mu);
  }
  within /= m;
  const double grand = mean_of(means);
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between *= static_cast<double>(n) / (m - 1.0);
  if (!(within > 0)) return std::nullopt;
  const double nn = static_cast<double>(n);
  const double pooled = (nn - 1.0) / nn * within + between / nn;
  return std::sqrt(pooled / within);
}

LLCEstimate estimate_llc(std::span<const double> w_star, const LossOracle& oracle,
                         const SGLDConfig& cfg) {
  cfg.validate();
  LLCEstimate est;
  est.reference_loss = oracle.reference_loss(w_star, cfg.minibatch);
  const Rng root = Rng(cfg.seed).derive("sgld");
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::vector<double>> retained;
  for (int c = 0; c < cfg.chains; ++c) {
    auto trace = sgld_chain(w_star, oracle, cfg, root.derive(static_cast<std::uint64_t>(c)));
    auto& diag = est.diagnostics;
    diag.diverged.push_back(trace.diverged);
    if (trace.diverged) {
      est.chain_means.push_back(std::nan(""));
      diag.geweke_z.push_back(std::nullopt);
      diag.rpd_percent.push_back(std::nullopt);
    } else {
      const std::span<const double> draws = std::span<const double>(trace.losses).subspan(cfg.burn_in);
      double s = 0.0;
      for (double x : draws) s += x;
      total += s;
      count += draws.size();
      est.chain_means.push_back(s / static_cast<double>(draws.size()));
      diag.geweke_z.push_back(geweke(draws));
      diag.rpd_percent.push_back(rpd(draws));
      retained.emplace_back(draws.begin(), draws.end());
    }
    est.traces.push_back(std::move(trace));
  }
  if (count == 0) throw EstimationFailure("every SGLD chain diverged");
  if (retained.size() >= 2) est.diagnostics.gelman_rubin = gelman_rubin(retained);
  est.lambda_hat = cfg.nbeta * (total / static_cast<double>(count) - est.reference_loss);
  return est;
}

std::vector<SweepCell> calibration_sweep(std::span<const double> w_star, const LossOracle& oracle,
                                         std::span<const double> step_grid,
                                         std::span<const double> nbeta_grid, const SGLDConfig& cfg) {
  if (step_grid.empty() || nbeta_grid.empty()) throw ConfigError("calibration grids must be non-empty");
  std::vector<SweepCell> cells;
  for (double eps : step_grid) {
    for (double nb : nbeta_grid) {
      SweepCell cell{eps, nb, std::nullopt, 0, {}};
      SGLDConfig c = cfg;
      c.step_size = eps;
      c.nbeta = nb;
      try {
        const auto est = estimate_llc(w_star, oracle, c);
        cell.lambda_hat = est.lambda_hat;
        for (bool d : est.diagnostics.diverged) cell.diverged_chains += d ? 1 : 0;
      } catch (const EstimationFailure& e) {
        cell.diverged_chains = c.chains;
        cell.error = e.what();
      } catch (const ConfigError& e) {
        cell.error = e.what();
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

Crossover tradeoff_crossover(double delta_loss, double delta_lambda) {
  if (delta_loss >= 0 && delta_lambda >= 0) return {std::nullopt, CrossoverReason::simple_always_preferred};
  if (delta_loss <= 0 && delta_lambda <= 0) return {std::nullopt, CrossoverReason::complex_always_preferred};
  if (delta_loss > 0) return {std::nullopt, CrossoverReason::roles_reversed};
  const double ratio = -delta_loss / delta_lambda;
  if (ratio > 1.0 / std::numbers::e) return {std::nullopt, CrossoverReason::immediate_preference};
  // log(n)/n falls monotonically from 1/e on [e, inf).
  auto f = [ratio](double n) { return std::log(n) / n - ratio; };
  double lo = std::numbers::e;
  double hi = 2.0 * lo;
  while (f(hi) > 0) hi *= 2.0;
  while ((hi - lo) > 1e-12 * hi) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > 0 ? lo : hi) = mid;
  }
  return {0.5 * (lo + hi), CrossoverReason::crossover};
}

const char* to_string(CrossoverReason reason) {
  switch (reason) {
    case CrossoverReason::crossover: return "crossover";
    case CrossoverReason::simple_always_preferred: return "simple_always_preferred";
    case CrossoverReason::complex_always_preferred: return "complex_always_preferred";
    case CrossoverReason::immediate_preference: return "immediate_preference";
    case CrossoverReason::roles_reversed: return "roles_reversed";
  }
  return "unknown";
}

}  // namespace icl
