#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "icl/data_gen.hpp"
#include "icl/transformer.hpp"

namespace icl {

struct TrainConfig {
  std::int64_t steps = 150000;
  int batch = 1024;
  double peak_lr = 0.003;
  std::int64_t warmup_steps = 50000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;  ///< initialization seed, shared by every diversity
  std::int64_t checkpoint_log_points = 1000;
  std::int64_t checkpoint_stride = 100;

  void validate() const;
};

/// Linear warmup from 0 to peak_lr over warmup_steps, constant afterwards.
double lr_at(std::int64_t step, const TrainConfig& cfg);

template <typename Scalar>
struct AdamState {
  std::vector<Scalar> m;
  std::vector<Scalar> v;
  std::int64_t t = 0;  ///< completed updates

  static AdamState zeros(std::size_t n) { return {std::vector<Scalar>(n), std::vector<Scalar>(n), 0}; }
};

/// One bias-corrected Adam update in place. Weight decay, when nonzero, is the
/// coupled L2 form (added to the gradient). Throws NumericalFailure if any
/// updated parameter is non-finite; `params` and `state` are untouched then.
template <typename Scalar>
void adam_step(std::span<Scalar> params, std::span<const Scalar> grad, AdamState<Scalar>& state,
               double lr, const TrainConfig& cfg);

enum class CheckpointSet { all, linear, log };

struct CheckpointSchedule {
  std::vector<std::int64_t> steps;  ///< sorted, unique

  bool contains(std::int64_t step) const;
  std::size_t size() const { return steps.size(); }
};

/// {0, stride, 2 stride, ..., T} union {floor(T^(j/(N_log-1))) : j = 0..N_log-1}.
/// `which` restricts to one of the two families (T and 0 are always kept).
CheckpointSchedule checkpoint_schedule(std::int64_t T, std::int64_t N_log, std::int64_t stride,
                                       CheckpointSet which = CheckpointSet::all);

struct LossCurve {
  std::vector<std::int64_t> steps;
  std::vector<double> values;
  std::string eval_set_id;
};

/// A context predictor f(S_{<=k}); k is 1-based.
using ContextPredictor = std::function<double(const RegressionSequence&, int)>;

/// N x K matrix of f(S^i_{<=k}).
Eigen::MatrixXd predict_dataset(const ContextPredictor& f, const Dataset& data);

/// Mean over sequences of (prediction - y_k)^2 for 1-based k.
double per_token_loss(const Eigen::MatrixXd& predictions, const Dataset& data, int k);
/// Mean over k of per_token_loss.
double empirical_loss(const Eigen::MatrixXd& predictions, const Dataset& data);

// Checkpoint files:
//   "ICLCKPT\0" | u32 version | u64 arch hash | u64 step | u64 count | count x f32
// Optimizer state files:
//   "ICLADAM\0" | u32 version | u64 arch hash | u64 step | u64 adam t | u64 count | m | v
void write_checkpoint(const std::filesystem::path& path, const ArchConfig& arch,
                      std::int64_t step, std::span<const float> params);
/// Verifies magic, version and architecture hash.
std::vector<float> read_checkpoint(const std::filesystem::path& path, const ArchConfig& arch,
                                   std::int64_t* step = nullptr);
void write_optimizer_state(const std::filesystem::path& path, const ArchConfig& arch,
                           std::int64_t step, const AdamState<float>& state);
AdamState<float> read_optimizer_state(const std::filesystem::path& path, const ArchConfig& arch,
                                      std::int64_t step);

struct CheckpointRecord {
  std::int64_t step = 0;
  std::string path;  ///< relative to the run directory
  std::string hash;
};

struct RunManifest {
  std::string diversity;  ///< TaskDiversity label
  DataConfig data;
  ArchConfig arch;
  TrainConfig train;
  std::vector<CheckpointRecord> checkpoints;
  std::string metrics_path = "metrics.csv";
  std::string status = "pending";  ///< pending | complete | failed
  std::string failure;
  std::int64_t last_good_step = -1;
  double wall_seconds = 0.0;
  std::filesystem::path run_dir;  ///< not serialized

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j, const std::filesystem::path& run_dir);
  static RunManifest load(const std::filesystem::path& run_dir);
  void save() const;

  /// Throws ManifestError if a referenced file is missing or its hash differs.
  void verify() const;
  /// Parameters of the checkpoint at `step`.
  std::vector<float> load_params(std::int64_t step) const;
};

nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const ArchConfig& c);
nlohmann::json to_json(const TrainConfig& c);
DataConfig data_config_from_json(const nlohmann::json& j);
ArchConfig arch_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Training batch for update `step`: a fixed function of (data_seed, step).
Dataset training_batch(const TaskDiversity& diversity, const DataConfig& data, int batch,
                       TaskPool& pool, std::int64_t step);

struct TrainOptions {
  bool resume = true;
  std::function<void(std::int64_t step, double loss)> on_step;
};

/// Runs train.steps Adam updates on fresh batches from q_M(S), persisting
/// parameters and optimizer state at every schedule index. When `resume` is set
/// and the run directory already holds checkpoints, continues from the latest
/// one bit-for-bit. On numerical failure the manifest is saved with
/// status "failed" and the last good checkpoint step, then NumericalFailure is
/// rethrown.
RunManifest train_run(const TaskDiversity& diversity, const DataConfig& data,
                      const ArchConfig& arch, const TrainConfig& train,
                      const CheckpointSchedule& schedule, const std::filesystem::path& run_dir,
                      const TrainOptions& options = {});

/// Empirical loss of every checkpoint on every named evaluation set.
std::map<std::string, LossCurve> evaluate_checkpoints(const RunManifest& manifest,
                                                      const std::map<std::string, Dataset>& eval_sets);

/// Step minimizing the Gaussian-smoothed curve; the earliest step wins ties.
std::int64_t critical_time(const LossCurve& curve, double smoothing_std);

}  // namespace icl
