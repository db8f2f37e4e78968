#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icl/rng.hpp"

namespace icl {

/// Data-generating hyperparameters. Defaults are the full-scale study values.
struct DataConfig {
  int D = 8;                ///< task dimension
  int K = 16;               ///< in-context examples per sequence
  double noise_var = 0.125; ///< label noise variance
  std::uint64_t pool_seed = 0;
  std::uint64_t data_seed = 1;

  void validate() const;
};

using TaskVector = Eigen::VectorXd;

/// Number of distinct tasks in the training distribution, or infinite
/// (fresh Gaussian task per sequence).
class TaskDiversity {
 public:
  static TaskDiversity finite(std::uint64_t m);
  static TaskDiversity infinite() { return TaskDiversity{}; }
  /// Accepts a positive integer or one of "inf", "infinity", "∞".
  static TaskDiversity parse(const std::string& text);

  bool is_infinite() const { return !value_.has_value(); }
  /// Requires !is_infinite().
  std::uint64_t value() const;
  /// "inf" or the decimal value; used in file paths and CSV columns.
  std::string label() const;

  friend bool operator==(const TaskDiversity&, const TaskDiversity&) = default;
  /// Finite values ascending, infinity last.
  friend bool operator<(const TaskDiversity& a, const TaskDiversity& b);

 private:
  TaskDiversity() = default;
  std::optional<std::uint64_t> value_;
};

/// The unbounded i.i.d. N(0, I_D) task stream t_1, t_2, ...
///
/// Task m (0-based) is drawn from its own keyed sub-stream, so every prefix is
/// nested in every longer prefix and the pool never has to be replayed.
class TaskPool {
 public:
  TaskPool(std::uint64_t seed, int D);

  int dimension() const { return D_; }
  std::uint64_t seed() const { return seed_; }

  /// Task with 0-based index m; computed on demand, does not touch the cache.
  TaskVector task(std::uint64_t m) const;
  /// First M tasks. Extends the cache as needed.
  const std::vector<TaskVector>& prefix(std::size_t M);

 private:
  std::uint64_t seed_;
  int D_;
  Rng stream_;
  std::vector<TaskVector> realized_;
};

struct RegressionSequence {
  Eigen::MatrixXd xs;  ///< K x D, row k is x_{k+1}
  Eigen::VectorXd ys;  ///< K labels
  TaskVector task;     ///< generating task

  int K() const { return static_cast<int>(xs.rows()); }
  int D() const { return static_cast<int>(xs.cols()); }
};

using Dataset = std::vector<RegressionSequence>;

/// 2K tokens of width D+1. Row 2k holds (0, x_{k+1}), row 2k+1 holds (y_{k+1}, 0...).
/// The final y_K token is present even though no prediction consumes it.
struct TokenizedSequence {
  Eigen::MatrixXd tokens;
};

TaskVector sample_task(const TaskDiversity& diversity, TaskPool& pool, Rng& rng);
/// Same draw against an already realized prefix (must hold at least M tasks).
TaskVector sample_task(const TaskDiversity& diversity, std::span<const TaskVector> prefix, int D,
                       Rng& rng);
RegressionSequence sample_sequence(const TaskVector& task, const DataConfig& cfg, Rng& rng);

/// n sequences; sequence i uses sub-streams derived from `rng` and i only,
/// so the result does not depend on evaluation order.
Dataset sample_dataset(const TaskDiversity& diversity, std::size_t n, const DataConfig& cfg,
                       TaskPool& pool, const Rng& rng);
Dataset sample_dataset(const TaskDiversity& diversity, std::size_t n, const DataConfig& cfg,
                       std::span<const TaskVector> prefix, const Rng& rng);

TokenizedSequence tokenize(const RegressionSequence& seq);
/// pi_Y: first component of tokens 1, 3, 5, ... (1-indexed). Throws on odd token counts.
Eigen::VectorXd extract_predictions(const Eigen::MatrixXd& output_tokens);

/// Binary export: per sequence, f64 little-endian D, K, then xs row-major, then ys.
void write_dataset(const std::filesystem::path& path, const Dataset& data);
/// Reads a dataset written by write_dataset. Tasks are not stored and come back empty.
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace icl
