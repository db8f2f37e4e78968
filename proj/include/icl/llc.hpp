#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icl/data_gen.hpp"
#include "icl/rng.hpp"
#include "icl/transformer.hpp"

namespace icl {

struct SGLDConfig {
  double step_size = 5e-5;     ///< epsilon
  double localization = 0.01;  ///< gamma
  double nbeta = 30.0;         ///< n * beta, the single temperature knob
  int minibatch = 1024;        ///< m
  int chains = 8;              ///< C
  int draws = 1500;            ///< retained draws per chain
  int burn_in = 2500;
  std::uint64_t seed = 0;
  /// Test hook: drop the injected Gaussian noise. Never set in production runs.
  bool suppress_noise = false;

  void validate() const;
};

/// Minibatch loss and gradient at an arbitrary parameter point.
/// Implementations must be safe to call concurrently (no shared mutable state).
class LossOracle {
 public:
  virtual ~LossOracle() = default;

  virtual std::size_t dimension() const = 0;
  /// Loss on a fresh minibatch drawn from `rng`; gradient written to `grad`.
  virtual double minibatch_loss(std::span<const double> w, int minibatch, Rng& rng,
                                std::span<double> grad) const = 0;
  /// Loss on a fixed reference batch of size `minibatch`.
  virtual double reference_loss(std::span<const double> w, int minibatch) const = 0;
};

/// l(w) = 0.5 * curvature * ||w||^2, exact (no minibatch noise).
class QuadraticOracle final : public LossOracle {
 public:
  explicit QuadraticOracle(std::size_t dimension, double curvature = 1.0)
      : dim_(dimension), curvature_(curvature) {}

  std::size_t dimension() const override { return dim_; }
  double minibatch_loss(std::span<const double> w, int, Rng&, std::span<double> grad) const override;
  double reference_loss(std::span<const double> w, int) const override;

 private:
  std::size_t dim_;
  double curvature_;
};

/// Constant loss everywhere.
class FlatOracle final : public LossOracle {
 public:
  explicit FlatOracle(std::size_t dimension, double level = 1.0) : dim_(dimension), level_(level) {}

  std::size_t dimension() const override { return dim_; }
  double minibatch_loss(std::span<const double>, int, Rng&, std::span<double> grad) const override;
  double reference_loss(std::span<const double>, int) const override { return level_; }

 private:
  std::size_t dim_;
  double level_;
};

/// Linear gradient g everywhere: l(w) = g . w.
class LinearOracle final : public LossOracle {
 public:
  explicit LinearOracle(Eigen::VectorXd gradient) : g_(std::move(gradient)) {}

  std::size_t dimension() const override { return static_cast<std::size_t>(g_.size()); }
  double minibatch_loss(std::span<const double> w, int, Rng&, std::span<double> grad) const override;
  double reference_loss(std::span<const double> w, int) const override;

 private:
  Eigen::VectorXd g_;
};

/// The transformer's regression loss on fresh batches from q_M(S).
class TransformerOracle final : public LossOracle {
 public:
  TransformerOracle(ArchConfig arch, DataConfig data, TaskDiversity diversity);

  std::size_t dimension() const override;
  double minibatch_loss(std::span<const double> w, int minibatch, Rng& rng,
                        std::span<double> grad) const override;
  double reference_loss(std::span<const double> w, int minibatch) const override;

 private:
  Dataset sample(int minibatch, const Rng& rng) const;

  Transformer<float> model_;
  DataConfig data_;
  TaskDiversity diversity_;
  std::vector<TaskVector> tasks_;  ///< realized pool prefix for finite M
};

struct ChainTrace {
  std::vector<double> losses;     ///< l_m(w_tau), one per step
  std::vector<double> distances;  ///< ||w_tau - w*||
  std::uint64_t seed = 0;
  bool diverged = false;
};

struct DiagnosticsReport {
  std::vector<std::optional<double>> geweke_z;
  std::vector<std::optional<double>> rpd_percent;
  std::optional<double> gelman_rubin;
  std::vector<bool> diverged;
};

struct LLCEstimate {
  double lambda_hat = 0.0;
  double reference_loss = 0.0;
  std::vector<double> chain_means;  ///< mean retained loss per chain (NaN when diverged)
  DiagnosticsReport diagnostics;
  std::vector<ChainTrace> traces;
};

/// One SGLD chain started at w*:
///   w <- w - (eps/2) (nbeta grad l_m(w) + gamma (w - w*)) + N(0, eps I)
/// Records the minibatch loss and distance to w* at every step before updating.
/// Divergence (non-finite values, or |loss| above 1e6 * max(|first loss|, 1))
/// truncates the trace and sets `diverged`.
ChainTrace sgld_chain(std::span<const double> w_star, const LossOracle& oracle,
                      const SGLDConfig& cfg, Rng rng);

/// lambda_hat = nbeta * (mean retained minibatch loss over surviving chains - l(w*)).
/// Throws EstimationFailure when every chain diverges.
LLCEstimate estimate_llc(std::span<const double> w_star, const LossOracle& oracle,
                         const SGLDConfig& cfg);

/// Post-burn-in mean of the first 10% against the last 50%, scaled by the
/// pooled standard error. nullopt when the variance is degenerate or the
/// segments are empty.
std::optional<double> geweke(std::span<const double> draws);
/// 100 * (mean last 50% - mean first 10%) / overall mean; nullopt when the
/// overall mean is (numerically) zero.
std::optional<double> rpd(std::span<const double> draws);
/// Classical potential scale reduction factor. Throws ConfigError for fewer than
/// two chains or unequal lengths; nullopt when the within-chain variance is zero.
std::optional<double> gelman_rubin(std::span<const std::vector<double>> chains);

struct SweepCell {
  double step_size = 0.0;
  double nbeta = 0.0;
  std::optional<double> lambda_hat;  ///< empty when every chain diverged
  int diverged_chains = 0;
  std::string error;
};

std::vector<SweepCell> calibration_sweep(std::span<const double> w_star, const LossOracle& oracle,
                                         std::span<const double> step_grid,
                                         std::span<const double> nbeta_grid, const SGLDConfig& cfg);

enum class CrossoverReason {
  crossover,               ///< n_star is set
  simple_always_preferred, ///< the simple solution is no worse in loss and no more complex
  complex_always_preferred,///< the accurate solution is also no more complex
  immediate_preference,    ///< ratio exceeds 1/e: the accurate solution wins for every n
  roles_reversed,          ///< the lower-loss solution is the simpler one
};

struct Crossover {
  std::optional<double> n_star;
  CrossoverReason reason = CrossoverReason::crossover;
};

/// With delta_loss = l(v) - l(u) < 0 and delta_lambda = lambda(v) - lambda(u) > 0,
/// the n* >= e solving log(n)/n = -delta_loss / delta_lambda; past it the posterior
/// prefers the accurate, complex solution v.
Crossover tradeoff_crossover(double delta_loss, double delta_lambda);
const char* to_string(CrossoverReason reason);

}  // namespace icl
