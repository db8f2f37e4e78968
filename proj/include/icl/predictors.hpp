#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "icl/data_gen.hpp"

namespace icl {

/// The context S_{<=k}: the first k-1 labeled pairs of a sequence plus query x_k.
struct ContextWindow {
  Eigen::MatrixXd xs;   ///< (k-1) x D labeled inputs
  Eigen::VectorXd ys;   ///< k-1 labels
  Eigen::VectorXd query;

  /// Context for 1-based position k of `seq`.
  static ContextWindow of(const RegressionSequence& seq, int k);

  int k() const { return static_cast<int>(ys.size()) + 1; }
};

enum class PredictorKind { dmmse, ridge };

struct TaskEstimate {
  Eigen::VectorXd theta;
  PredictorKind kind = PredictorKind::ridge;
  std::size_t num_tasks = 0;  ///< M for dMMSE, 0 for ridge
};

/// Posterior mean over a finite task set under the uniform prior:
/// softmax-weighted average of tasks with logits -SSE_m / (2 sigma^2).
TaskEstimate dmmse_task_estimate(const ContextWindow& ctx, std::span<const TaskVector> tasks,
                                 double noise_var);

/// Ridge with penalty sigma^2 on the labeled pairs; zero when there are none.
TaskEstimate ridge_task_estimate(const ContextWindow& ctx, double noise_var);

double predict(const TaskEstimate& est, const Eigen::VectorXd& query);

/// Predictions g_k(S^i_{<=k}) for i = 1..B, k = 1..K, sequence-major; the same
/// ordering as the transformer's function-space encoding.
///
/// dMMSE rows accumulate the per-task residual sums incrementally over k, so a
/// row costs O(B K M D) and tasks are streamed.
std::vector<double> predictor_row(const Dataset& data, PredictorKind kind,
                                  std::span<const TaskVector> tasks, double noise_var);

/// CSV export: `row_id,k,value` with row_id the 0-based sequence index and k 1-based.
void write_predictor_csv(const std::filesystem::path& path, std::span<const double> row, int K);

}  // namespace icl
