#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "icl/data_gen.hpp"
#include "icl/llc.hpp"
#include "icl/training.hpp"
#include "icl/transformer.hpp"

namespace icl {

struct PcaOptions {
  int batch = 512;           ///< B, sequences of the root-task dataset used as features
  int components = 2;        ///< v
  CheckpointSet checkpoints = CheckpointSet::all;
};

struct LlcOptions {
  SGLDConfig sgld;
  bool every_checkpoint = false;
  int checkpoint_stride = 1;  ///< with every_checkpoint, estimate at every n-th checkpoint
  std::vector<double> step_grid;
  std::vector<double> nbeta_grid;
};

/// Everything a study needs, assembled from a TOML file.
struct ExperimentSpec {
  std::string name = "study";
  std::filesystem::path output_root = "out";
  std::uint64_t seed = 0;
  int workers = 1;
  DataConfig data;
  ArchConfig arch;
  TrainConfig train;
  std::vector<TaskDiversity> diversities;
  int eval_size = 512;
  PcaOptions pca;
  LlcOptions llc;
  double smoothing_std = 20;  ///< report-level, in checkpoints
  std::set<std::string> explicit_seeds;  ///< module seeds given in the file

  std::filesystem::path study_dir() const { return output_root / name; }
  std::filesystem::path run_dir(const TaskDiversity& m) const { return study_dir() / m.label(); }
  CheckpointSchedule schedule() const;
};

struct SpecIssue {
  int line = 0;  ///< 0 when the issue is not tied to one line
  std::string message;
};

struct SpecDiagnostics {
  std::vector<SpecIssue> issues;
  bool ok() const { return issues.empty(); }
  std::string format(const std::string& path) const;
};

/// Parses and checks every cross-module invariant. Never throws on bad input;
/// all problems are returned with their line numbers.
SpecDiagnostics validate_spec_text(const std::string& text, ExperimentSpec* out = nullptr);
SpecDiagnostics validate_spec(const std::filesystem::path& path, ExperimentSpec* out = nullptr);

/// Loads a spec or throws ConfigError carrying the formatted diagnostics.
/// `seed_override` replaces study.seed and re-derives every module seed.
ExperimentSpec load_spec(const std::filesystem::path& path,
                         std::optional<std::uint64_t> seed_override = std::nullopt);

/// Module seeds not set explicitly are derived from study.seed.
void derive_seeds(ExperimentSpec& spec, bool force);

/// Fixed evaluation sets: root task, one in-distribution set per M, and the
/// Gaussian-task set. Written once under <study>/eval/ and reused.
struct EvalSets {
  Dataset root;
  Dataset ood;
  std::map<std::string, Dataset> in_distribution;  ///< keyed by diversity label
};
EvalSets make_eval_sets(const ExperimentSpec& spec);
void write_eval_sets(const ExperimentSpec& spec, const EvalSets& sets);

/// Trains every diversity whose run is not already complete and hash-verified.
/// Runs execute on up to spec.workers threads. Returns failures by label.
std::map<std::string, std::string> run_sweep(const ExperimentSpec& spec, bool verbose = false);

/// Writes <run>/eval.csv with step, loss_root, loss_id, loss_ood.
void evaluate_run(const ExperimentSpec& spec, const TaskDiversity& m, const EvalSets& sets);

/// Joint trajectory PCA across every completed run; writes <study>/pca/.
nlohmann::json run_pca(const ExperimentSpec& spec, const EvalSets& sets);

/// LLC at the final checkpoint (and optionally along training); writes <study>/llc/.
nlohmann::json run_llc(const ExperimentSpec& spec, const TaskDiversity& m);

/// LLC at one checkpoint file; writes estimate.json and traces.csv under out_dir.
nlohmann::json llc_at_checkpoint(const std::filesystem::path& checkpoint, const ExperimentSpec& spec,
                                 const TaskDiversity& m, const std::filesystem::path& out_dir);

/// Calibration grid at the final checkpoint of run m; one CSV per grid.
void run_calibration(const ExperimentSpec& spec, const TaskDiversity& m);

/// Full pipeline: sweep, evaluation, PCA, predictor references, LLC, report.json.
nlohmann::json run_study(const ExperimentSpec& spec, bool verbose = false);

/// Figure-data CSVs under <study>/figures/. `which` is "all" or one of
/// ood, pca, predictors, final_loss, llc, loadings, per_token, llc_time.
std::vector<std::filesystem::path> export_figure_data(const ExperimentSpec& spec, const std::string& which);

}  // namespace icl
