// icl_lab: command-line driver for in-context regression studies.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "icl/errors.hpp"
#include "icl/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

icl::TaskDiversity diversity_in(const icl::ExperimentSpec& spec, const std::string& text) {
  const auto m = icl::TaskDiversity::parse(text);
  for (const auto& d : spec.diversities) {
    if (d == m) return m;
  }
  throw icl::ConfigError("diversity " + text + " is not in sweep.diversities");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer in-context regression laboratory"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Override study.seed and every derived module seed");
  app.add_flag("-v,--verbose", common.verbose, "Progress on stderr");

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("config", common.config, "Experiment spec (TOML)")->required()->check(CLI::ExistingFile);
  };

  auto* validate = app.add_subcommand("validate", "Check a spec and report every problem with its line");
  add_config(validate);

  std::string diversity;
  bool fresh = false;
  auto* train = app.add_subcommand("train", "Train one diversity of the sweep");
  add_config(train);
  train->add_option("-m,--diversity", diversity, "Task diversity (integer or inf)")->required();
  train->add_flag("--fresh", fresh, "Ignore existing checkpoints");

  auto* sweep = app.add_subcommand("sweep", "Train every diversity that is not already complete");
  add_config(sweep);

  auto* eval = app.add_subcommand("eval", "Evaluate every checkpoint of completed runs");
  add_config(eval);
  eval->add_option("-m,--diversity", diversity, "Only this diversity");

  auto* pca = app.add_subcommand("pca", "Joint trajectory PCA over completed runs");
  add_config(pca);

  std::string checkpoint;
  std::string out_dir;
  bool calibrate = false;
  auto* llc = app.add_subcommand("llc", "Estimate the local learning coefficient");
  add_config(llc);
  llc->add_option("-m,--diversity", diversity, "Task diversity")->required();
  llc->add_option("--checkpoint", checkpoint, "Checkpoint file instead of the final one")->check(CLI::ExistingFile);
  llc->add_option("--out", out_dir, "Output directory for --checkpoint");
  llc->add_flag("--calibrate", calibrate, "Sweep llc.step_grid x llc.nbeta_grid at the final checkpoint");

  std::string which = "all";
  auto* export_cmd = app.add_subcommand("export", "Write figure-data CSVs");
  add_config(export_cmd);
  export_cmd->add_option("--which", which,
                         "all, ood, pca, final_loss, llc, loadings, per_token or llc_time");

  auto* report = app.add_subcommand("report", "Run the whole study and write report.json");
  add_config(report);

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) common.seed = seed_value;

  try {
    if (validate->parsed()) {
      const auto diag = icl::validate_spec(common.config);
      if (diag.ok()) {
        std::cout << common.config << ": ok\n";
        return 0;
      }
      std::cerr << diag.format(common.config);
      return 1;
    }

    const auto spec = icl::load_spec(common.config, common.seed);

    if (train->parsed()) {
      const auto m = diversity_in(spec, diversity);
      const auto run_dir = spec.run_dir(m);
      icl::TrainOptions options;
      options.resume = !fresh;
      if (common.verbose) {
        options.on_step = [](std::int64_t step, double loss) {
          if ((step + 1) % 100 == 0) std::cerr << "step " << step + 1 << " loss " << loss << '\n';
        };
      }
      const auto manifest = icl::train_run(m, spec.data, spec.arch, spec.train, spec.schedule(), run_dir, options);
      std::cout << (run_dir / "manifest.json").string() << ' ' << manifest.status << '\n';
    } else if (sweep->parsed()) {
      const auto failures = icl::run_sweep(spec, common.verbose);
      for (const auto& [label, why] : failures) std::cerr << label << ": " << why << '\n';
      return failures.empty() ? 0 : 1;
    } else if (eval->parsed()) {
      const auto sets = icl::make_eval_sets(spec);
      icl::write_eval_sets(spec, sets);
      int failed = 0;
      for (const auto& m : spec.diversities) {
        if (!diversity.empty() && !(m == icl::TaskDiversity::parse(diversity))) continue;
        try {
          icl::evaluate_run(spec, m, sets);
          std::cout << (spec.run_dir(m) / "eval.csv").string() << '\n';
        } catch (const icl::ManifestError& e) {
          std::cerr << m.label() << ": " << e.what() << '\n';
          ++failed;
        }
      }
      return failed == 0 ? 0 : 1;
    } else if (pca->parsed()) {
      const auto summary = icl::run_pca(spec, icl::make_eval_sets(spec));
      std::cout << summary.dump(2) << '\n';
    } else if (llc->parsed()) {
      const auto m = diversity_in(spec, diversity);
      if (calibrate) {
        icl::run_calibration(spec, m);
        std::cout << (spec.study_dir() / "llc" / (m.label() + "_calibration.csv")).string() << '\n';
      } else if (!checkpoint.empty()) {
        const fs::path dir = out_dir.empty() ? fs::path(checkpoint).parent_path() / "llc" : fs::path(out_dir);
        std::cout << icl::llc_at_checkpoint(checkpoint, spec, m, dir).dump(2) << '\n';
      } else {
        std::cout << icl::run_llc(spec, m).dump(2) << '\n';
      }
    } else if (export_cmd->parsed()) {
      for (const auto& path : icl::export_figure_data(spec, which)) std::cout << path.string() << '\n';
    } else if (report->parsed()) {
      icl::run_study(spec, common.verbose);
      std::cout << (spec.study_dir() / "report.json").string() << '\n';
    }
  } catch (const icl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
