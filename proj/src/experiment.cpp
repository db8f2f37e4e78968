#include "icl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "icl/binary_io.hpp"
#include "icl/errors.hpp"
#include "icl/predictors.hpp"
#include "icl/toml_table.hpp"
#include "icl/trajectory_pca.hpp"

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMissing = "missing";

std::string num(double v) {
  if (!std::isfinite(v)) return kMissing;
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json optional_json(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

const char* checkpoint_set_name(CheckpointSet s) {
  switch (s) {
    case CheckpointSet::all: return "all";
    case CheckpointSet::linear: return "linear";
    case CheckpointSet::log: return "log";
  }
  return "all";
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double parse_num(const std::string& s) {
  if (s == kMissing) return std::nan("");
  return std::stod(s);
}

json file_ref(const fs::path& study, const fs::path& path) {
  return {{"file", fs::relative(path, study).generic_string()}, {"hash", io::file_hash(path)}};
}

int worker_count(const ExperimentSpec& spec) {
  if (const char* env = std::getenv("ICL_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return spec.workers;
}

// Runs body(0..n-1) on up to `workers` threads. body must not throw.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < std::min(w, n); ++t) {
    threads.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) body(i);
    });
  }
  for (auto& t : threads) t.join();
}

// ---- spec parsing ---------------------------------------------------------

enum class Kind { int32, int64, seed, number, boolean, string, numbers, diversities };

using Setter = void (*)(ExperimentSpec&, const toml::Value&);

struct KeyRule {
  const char* key;
  Kind kind;
  Setter set;
};

int i32(const toml::Value& v) { return static_cast<int>(v.as_int()); }

std::vector<double> numbers(const toml::Value& v) {
  std::vector<double> out;
  for (const auto& e : v.as_array()) out.push_back(e.as_number());
  return out;
}

const std::vector<KeyRule>& rules() {
  static const std::vector<KeyRule> table = {
      {"study.name", Kind::string, [](ExperimentSpec& s, const toml::Value& v) { s.name = v.as_string(); }},
      {"study.output_root", Kind::string,
       [](ExperimentSpec& s, const toml::Value& v) { s.output_root = v.as_string(); }},
      {"study.seed", Kind::seed,
       [](ExperimentSpec& s, const toml::Value& v) { s.seed = static_cast<std::uint64_t>(v.as_int()); }},
      {"study.workers", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.workers = i32(v); }},

      {"data.D", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.data.D = i32(v); }},
      {"data.K", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.data.K = i32(v); }},
      {"data.noise_var", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.data.noise_var = v.as_number(); }},
      {"data.pool_seed", Kind::seed,
       [](ExperimentSpec& s, const toml::Value& v) { s.data.pool_seed = static_cast<std::uint64_t>(v.as_int()); }},
      {"data.data_seed", Kind::seed,
       [](ExperimentSpec& s, const toml::Value& v) { s.data.data_seed = static_cast<std::uint64_t>(v.as_int()); }},

      {"model.layers", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.arch.layers = i32(v); }},
      {"model.heads", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.arch.heads = i32(v); }},
      {"model.d_embed", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.arch.d_embed = i32(v); }},
      {"model.d_mlp", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.arch.d_mlp = i32(v); }},
      {"model.activation", Kind::string,
       [](ExperimentSpec& s, const toml::Value& v) {
         if (v.as_string() == "gelu") {
           s.arch.activation = Activation::gelu;
         } else if (v.as_string() == "relu") {
           s.arch.activation = Activation::relu;
         } else {
           throw ConfigError("expected \"gelu\" or \"relu\", got \"" + v.as_string() + "\"");
         }
       }},
      {"model.attn_output_proj", Kind::boolean,
       [](ExperimentSpec& s, const toml::Value& v) { s.arch.attn_output_proj = v.as_bool(); }},

      {"train.steps", Kind::int64, [](ExperimentSpec& s, const toml::Value& v) { s.train.steps = v.as_int(); }},
      {"train.batch", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.train.batch = i32(v); }},
      {"train.peak_lr", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.peak_lr = v.as_number(); }},
      {"train.warmup_steps", Kind::int64,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.warmup_steps = v.as_int(); }},
      {"train.adam_beta1", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.adam_beta1 = v.as_number(); }},
      {"train.adam_beta2", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.adam_beta2 = v.as_number(); }},
      {"train.adam_eps", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.adam_eps = v.as_number(); }},
      {"train.weight_decay", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.weight_decay = v.as_number(); }},
      {"train.seed", Kind::seed,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.seed = static_cast<std::uint64_t>(v.as_int()); }},
      {"train.checkpoint_log_points", Kind::int64,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.checkpoint_log_points = v.as_int(); }},
      {"train.checkpoint_stride", Kind::int64,
       [](ExperimentSpec& s, const toml::Value& v) { s.train.checkpoint_stride = v.as_int(); }},

      {"sweep.diversities", Kind::diversities,
       [](ExperimentSpec& s, const toml::Value& v) {
         s.diversities.clear();
         for (const auto& e : v.as_array()) {
           if (e.is_int()) {
             if (e.as_int() < 1) throw ConfigError("task diversities must be >= 1");
             s.diversities.push_back(TaskDiversity::finite(static_cast<std::uint64_t>(e.as_int())));
           } else {
             s.diversities.push_back(TaskDiversity::parse(e.as_string()));
           }
         }
       }},

      {"eval.size", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.eval_size = i32(v); }},

      {"pca.batch", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.pca.batch = i32(v); }},
      {"pca.components", Kind::int32,
       [](ExperimentSpec& s, const toml::Value& v) { s.pca.components = i32(v); }},
      {"pca.checkpoints", Kind::string,
       [](ExperimentSpec& s, const toml::Value& v) {
         const auto& t = v.as_string();
         if (t == "all") {
           s.pca.checkpoints = CheckpointSet::all;
         } else if (t == "linear") {
           s.pca.checkpoints = CheckpointSet::linear;
         } else if (t == "log") {
           s.pca.checkpoints = CheckpointSet::log;
         } else {
           throw ConfigError("expected \"all\", \"linear\" or \"log\", got \"" + t + "\"");
         }
       }},

      {"report.smoothing_std", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.smoothing_std = v.as_number(); }},

      {"llc.step_size", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.step_size = v.as_number(); }},
      {"llc.localization", Kind::number,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.localization = v.as_number(); }},
      {"llc.nbeta", Kind::number, [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.nbeta = v.as_number(); }},
      {"llc.minibatch", Kind::int32,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.minibatch = i32(v); }},
      {"llc.chains", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.chains = i32(v); }},
      {"llc.draws", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.draws = i32(v); }},
      {"llc.burn_in", Kind::int32, [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.burn_in = i32(v); }},
      {"llc.seed", Kind::seed,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.sgld.seed = static_cast<std::uint64_t>(v.as_int()); }},
      {"llc.every_checkpoint", Kind::boolean,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.every_checkpoint = v.as_bool(); }},
      {"llc.checkpoint_stride", Kind::int32,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.checkpoint_stride = i32(v); }},
      {"llc.step_grid", Kind::numbers,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.step_grid = numbers(v); }},
      {"llc.nbeta_grid", Kind::numbers,
       [](ExperimentSpec& s, const toml::Value& v) { s.llc.nbeta_grid = numbers(v); }},
  };
  return table;
}

std::optional<std::string> type_error(Kind kind, const toml::Value& v) {
  auto expected = [&](const char* what) {
    return std::optional<std::string>(std::string("expected ") + what + ", got " + v.type_name());
  };
  switch (kind) {
    case Kind::int32:
      if (!v.is_int()) return expected("an integer");
      if (v.as_int() < -2147483647LL || v.as_int() > 2147483647LL) return "integer out of range";
      return std::nullopt;
    case Kind::int64:
      if (!v.is_int()) return expected("an integer");
      return std::nullopt;
    case Kind::seed:
      if (!v.is_int()) return expected("an integer");
      if (v.as_int() < 0) return "seeds must be non-negative";
      return std::nullopt;
    case Kind::number:
      if (!v.is_number()) return expected("a number");
      return std::nullopt;
    case Kind::boolean:
      if (!v.is_bool()) return expected("a boolean");
      return std::nullopt;
    case Kind::string:
      if (!v.is_string()) return expected("a string");
      return std::nullopt;
    case Kind::numbers:
      if (!v.is_array()) return expected("an array of numbers");
      for (const auto& e : v.as_array()) {
        if (!e.is_number()) return "array elements must be numbers, got " + e.type_name();
      }
      return std::nullopt;
    case Kind::diversities:
      if (!v.is_array()) return expected("an array of diversities");
      for (const auto& e : v.as_array()) {
        if (!e.is_int() && !e.is_string()) {
          return "diversities must be integers or \"inf\", got " + e.type_name();
        }
      }
      return std::nullopt;
  }
  return std::nullopt;
}

bool is_seed_key(const std::string& key) {
  return key == "data.pool_seed" || key == "data.data_seed" || key == "train.seed" || key == "llc.seed";
}

json spec_json(const ExperimentSpec& spec) {
  json div = json::array();
  for (const auto& m : spec.diversities) div.push_back(m.label());
  const auto& s = spec.llc.sgld;
  return {{"name", spec.name},
          {"seed", spec.seed},
          {"data", to_json(spec.data)},
          {"arch", to_json(spec.arch)},
          {"train", to_json(spec.train)},
          {"diversities", div},
          {"eval_size", spec.eval_size},
          {"pca",
           {{"batch", spec.pca.batch},
            {"components", spec.pca.components},
            {"checkpoints", checkpoint_set_name(spec.pca.checkpoints)}}},
          {"smoothing_std", spec.smoothing_std},
          {"llc",
           {{"step_size", s.step_size},
            {"localization", s.localization},
            {"nbeta", s.nbeta},
            {"minibatch", s.minibatch},
            {"chains", s.chains},
            {"draws", s.draws},
            {"burn_in", s.burn_in},
            {"seed", s.seed},
            {"every_checkpoint", spec.llc.every_checkpoint},
            {"checkpoint_stride", spec.llc.checkpoint_stride}}}};
}

json sgld_json(const SGLDConfig& s) {
  return {{"step_size", s.step_size}, {"localization", s.localization}, {"nbeta", s.nbeta},
          {"minibatch", s.minibatch}, {"chains", s.chains},             {"draws", s.draws},
          {"burn_in", s.burn_in},     {"seed", s.seed}};
}

}  // namespace

CheckpointSchedule ExperimentSpec::schedule() const {
  return checkpoint_schedule(train.steps, train.checkpoint_log_points, train.checkpoint_stride);
}

std::string SpecDiagnostics::format(const std::string& path) const {
  std::ostringstream out;
  for (const auto& issue : issues) {
    out << path;
    if (issue.line > 0) out << ':' << issue.line;
    out << ": " << issue.message << '\n';
  }
  return out.str();
}

SpecDiagnostics validate_spec_text(const std::string& text, ExperimentSpec* out) {
  SpecDiagnostics diag;
  toml::Table table;
  toml::ParseError perr;
  if (!toml::parse(text, table, perr)) {
    diag.issues.push_back({perr.line, "parse error: " + perr.message});
    return diag;
  }

  ExperimentSpec spec;
  for (const auto& [key, value] : table) {
    const auto& all = rules();
    const auto rule = std::find_if(all.begin(), all.end(), [&](const KeyRule& r) { return key == r.key; });
    if (rule == all.end()) {
      diag.issues.push_back({value.line, "unknown key '" + key + "'"});
      continue;
    }
    if (const auto err = type_error(rule->kind, value)) {
      diag.issues.push_back({value.line, key + ": " + *err});
      continue;
    }
    try {
      rule->set(spec, value);
      if (is_seed_key(key)) spec.explicit_seeds.insert(key);
    } catch (const std::exception& e) {
      diag.issues.push_back({value.line, key + ": " + e.what()});
    }
  }
  spec.arch.context_tokens = 2 * spec.data.K;
  spec.arch.token_dim = spec.data.D + 1;

  auto line_of = [&](const std::string& key) {
    const auto it = table.find(key);
    return it == table.end() ? 0 : it->second.line;
  };
  auto require = [&](bool ok, const std::string& key, const std::string& message) {
    if (!ok) diag.issues.push_back({line_of(key), message});
  };
  auto show = [](double v) { return num(v) == kMissing ? std::to_string(v) : num(v); };

  require(!spec.name.empty() && spec.name.find('/') == std::string::npos, "study.name",
          "study.name must be a non-empty directory name");
  require(spec.workers >= 1, "study.workers", "study.workers must be >= 1");

  require(spec.data.D >= 1, "data.D", "data.D must be >= 1 (got " + std::to_string(spec.data.D) + ")");
  require(spec.data.K >= 1, "data.K", "data.K must be >= 1 (got " + std::to_string(spec.data.K) + ")");
  require(std::isfinite(spec.data.noise_var) && spec.data.noise_var > 0, "data.noise_var",
          "data.noise_var must be a positive variance (got " + show(spec.data.noise_var) + ")");

  const auto& a = spec.arch;
  require(a.layers >= 1, "model.layers", "model.layers must be >= 1");
  require(a.heads >= 1, "model.heads", "model.heads must be >= 1");
  require(a.d_embed >= 1, "model.d_embed", "model.d_embed must be >= 1");
  require(a.d_mlp >= 1, "model.d_mlp", "model.d_mlp must be >= 1");
  if (a.heads >= 1 && a.d_embed >= 1 && a.d_embed % a.heads != 0) {
    const std::string key = line_of("model.d_embed") > 0 ? "model.d_embed" : "model.heads";
    require(false, key,
            "model.d_embed (" + std::to_string(a.d_embed) + ") is not divisible by model.heads (" +
                std::to_string(a.heads) + ")");
  }

  const auto& t = spec.train;
  require(t.steps >= 1, "train.steps", "train.steps must be >= 1");
  require(t.batch >= 1, "train.batch", "train.batch must be >= 1");
  require(std::isfinite(t.peak_lr) && t.peak_lr > 0, "train.peak_lr", "train.peak_lr must be > 0");
  require(t.warmup_steps >= 0, "train.warmup_steps", "train.warmup_steps must be >= 0");
  require(t.adam_beta1 >= 0 && t.adam_beta1 < 1, "train.adam_beta1", "train.adam_beta1 must lie in [0, 1)");
  require(t.adam_beta2 >= 0 && t.adam_beta2 < 1, "train.adam_beta2", "train.adam_beta2 must lie in [0, 1)");
  require(t.adam_eps > 0, "train.adam_eps", "train.adam_eps must be > 0");
  require(t.weight_decay >= 0, "train.weight_decay", "train.weight_decay must be >= 0");
  require(t.checkpoint_log_points >= 2, "train.checkpoint_log_points", "train.checkpoint_log_points must be >= 2");
  require(t.checkpoint_stride >= 1, "train.checkpoint_stride", "train.checkpoint_stride must be >= 1");

  require(!spec.diversities.empty(), "sweep.diversities", "sweep.diversities must list at least one diversity");
  {
    auto sorted = spec.diversities;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      require(false, "sweep.diversities", "sweep.diversities contains duplicates");
    }
  }

  require(spec.eval_size >= 1, "eval.size", "eval.size must be >= 1");
  require(spec.pca.batch >= 1 && spec.pca.batch <= spec.eval_size, "pca.batch",
          "pca.batch must lie in [1, eval.size]");
  require(spec.pca.components >= 1 &&
              static_cast<std::int64_t>(spec.pca.components) <=
                  static_cast<std::int64_t>(spec.pca.batch) * spec.data.K,
          "pca.components", "pca.components must lie in [1, pca.batch * data.K]");
  require(std::isfinite(spec.smoothing_std) && spec.smoothing_std >= 0, "report.smoothing_std",
          "report.smoothing_std must be >= 0");

  const auto& s = spec.llc.sgld;
  require(s.step_size > 0, "llc.step_size", "llc.step_size must be > 0");
  require(s.localization >= 0, "llc.localization", "llc.localization must be >= 0");
  require(s.nbeta > 0, "llc.nbeta", "llc.nbeta must be > 0");
  require(s.minibatch >= 1, "llc.minibatch", "llc.minibatch must be >= 1");
  require(s.chains >= 1, "llc.chains", "llc.chains must be >= 1");
  require(s.draws >= 1, "llc.draws", "llc.draws must be >= 1");
  require(s.burn_in >= 0, "llc.burn_in", "llc.burn_in must be >= 0");
  require(spec.llc.checkpoint_stride >= 1, "llc.checkpoint_stride", "llc.checkpoint_stride must be >= 1");
  for (double v : spec.llc.step_grid) require(v > 0, "llc.step_grid", "llc.step_grid entries must be > 0");
  for (double v : spec.llc.nbeta_grid) require(v > 0, "llc.nbeta_grid", "llc.nbeta_grid entries must be > 0");

  if (diag.ok()) {
    // Anything the module validators catch that the checks above missed.
    try {
      spec.data.validate();
      spec.arch.validate();
      spec.train.validate();
      spec.llc.sgld.validate();
    } catch (const ConfigError& e) {
      diag.issues.push_back({0, e.what()});
    }
  }

  std::stable_sort(diag.issues.begin(), diag.issues.end(),
                   [](const SpecIssue& x, const SpecIssue& y) { return x.line < y.line; });
  if (diag.ok()) {
    derive_seeds(spec, false);
    if (out) *out = spec;
  }
  return diag;
}

SpecDiagnostics validate_spec(const fs::path& path, ExperimentSpec* out) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const std::exception& e) {
    SpecDiagnostics diag;
    diag.issues.push_back({0, std::string("cannot read file: ") + e.what()});
    return diag;
  }
  return validate_spec_text(text, out);
}

ExperimentSpec load_spec(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  ExperimentSpec spec;
  const auto diag = validate_spec(path, &spec);
  if (!diag.ok()) throw ConfigError(diag.format(path.string()));
  if (seed_override) {
    spec.seed = *seed_override;
    derive_seeds(spec, true);
  }
  return spec;
}

void derive_seeds(ExperimentSpec& spec, bool force) {
  auto derived = [&](std::string_view tag) { return Rng(spec.seed).derive(tag).next_u64() >> 1; };
  auto keep = [&](const char* key) { return !force && spec.explicit_seeds.count(key) > 0; };
  if (!keep("data.pool_seed")) spec.data.pool_seed = derived("pool");
  if (!keep("data.data_seed")) spec.data.data_seed = derived("data");
  if (!keep("train.seed")) spec.train.seed = derived("init");
  if (!keep("llc.seed")) spec.llc.sgld.seed = derived("sgld");
}

// ---- evaluation sets -------------------------------------------------------

EvalSets make_eval_sets(const ExperimentSpec& spec) {
  EvalSets sets;
  TaskPool pool(spec.data.pool_seed, spec.data.D);
  const Rng root = Rng(spec.data.data_seed).derive("eval");
  const auto n = static_cast<std::size_t>(spec.eval_size);
  sets.root = sample_dataset(TaskDiversity::finite(1), n, spec.data, pool, root.derive("root"));
  sets.ood = sample_dataset(TaskDiversity::infinite(), n, spec.data, pool, root.derive("ood"));
  for (const auto& m : spec.diversities) {
    sets.in_distribution[m.label()] =
        m.is_infinite() ? sets.ood : sample_dataset(m, n, spec.data, pool, root.derive("id").derive(m.label()));
  }
  return sets;
}

void write_eval_sets(const ExperimentSpec& spec, const EvalSets& sets) {
  const auto dir = spec.study_dir() / "eval";
  fs::create_directories(dir);
  json files = json::object();
  auto put = [&](const std::string& name, const std::string& diversity, const Dataset& data) {
    const auto path = dir / (name + ".bin");
    write_dataset(path, data);
    files[name] = {{"path", path.filename().string()},
                   {"diversity", diversity},
                   {"size", data.size()},
                   {"hash", io::file_hash(path)}};
  };
  put("root", "1", sets.root);
  put("ood", "inf", sets.ood);
  for (const auto& [label, data] : sets.in_distribution) put("id_" + label, label, data);
  const json manifest = {{"data", to_json(spec.data)}, {"sets", files}};
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- training -------------------------------------------------------------

namespace {

bool run_is_complete(const ExperimentSpec& spec, const TaskDiversity& m) {
  const auto dir = spec.run_dir(m);
  if (!fs::exists(dir / "manifest.json")) return false;
  try {
    const auto man = RunManifest::load(dir);
    if (man.status != "complete" || man.diversity != m.label()) return false;
    if (to_json(man.data) != to_json(spec.data) || to_json(man.arch) != to_json(spec.arch) ||
        to_json(man.train) != to_json(spec.train)) {
      return false;
    }
    if (man.checkpoints.empty() || man.checkpoints.back().step != spec.train.steps) return false;
    man.verify();
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

RunManifest load_complete(const ExperimentSpec& spec, const TaskDiversity& m) {
  if (!run_is_complete(spec, m)) throw ManifestError("run " + m.label() + " is missing or incomplete");
  return RunManifest::load(spec.run_dir(m));
}

std::mutex log_mutex;

void log_line(bool verbose, const std::string& line) {
  if (!verbose) return;
  std::lock_guard lock(log_mutex);
  std::cerr << line << std::endl;
}

}  // namespace

std::map<std::string, std::string> run_sweep(const ExperimentSpec& spec, bool verbose) {
  std::map<std::string, std::string> failures;
  std::mutex failures_mutex;
  const auto schedule = spec.schedule();
  parallel_for(spec.diversities.size(), worker_count(spec), [&](std::size_t i) {
    const auto& m = spec.diversities[i];
    if (run_is_complete(spec, m)) {
      log_line(verbose, "[" + m.label() + "] complete, skipping");
      return;
    }
    log_line(verbose, "[" + m.label() + "] training");
    TrainOptions options;
    options.on_step = [&, label = m.label()](std::int64_t step, double loss) {
      if ((step + 1) % 500 == 0) log_line(verbose, "[" + label + "] step " + std::to_string(step + 1) + " loss " + num(loss));
    };
    try {
      train_run(m, spec.data, spec.arch, spec.train, schedule, spec.run_dir(m), options);
      log_line(verbose, "[" + m.label() + "] done");
    } catch (const std::exception& e) {
      std::lock_guard lock(failures_mutex);
      failures[m.label()] = e.what();
      log_line(verbose, "[" + m.label() + "] failed: " + e.what());
    }
  });
  return failures;
}

// ---- evaluation -----------------------------------------------------------

void evaluate_run(const ExperimentSpec& spec, const TaskDiversity& m, const EvalSets& sets) {
  const auto dir = spec.run_dir(m);
  const auto man = load_complete(spec, m);
  std::string ckpt_hashes;
  for (const auto& c : man.checkpoints) ckpt_hashes += c.hash;
  const auto eval_manifest = spec.study_dir() / "eval" / "manifest.json";
  const std::string key =
      io::hex64(fnv1a64(ckpt_hashes + (fs::exists(eval_manifest) ? io::file_hash(eval_manifest) : "")));
  const auto stamp = dir / "eval.json";
  if (fs::exists(stamp) && fs::exists(dir / "eval.csv") && fs::exists(dir / "per_token.csv")) {
    try {
      if (json::parse(io::read_text(stamp)).at("key") == key) return;
    } catch (const std::exception&) {
    }
  }

  const std::map<std::string, Dataset> named = {
      {"root", sets.root}, {"id", sets.in_distribution.at(m.label())}, {"ood", sets.ood}};
  const auto curves = evaluate_checkpoints(man, named);
  std::ostringstream csv;
  csv << "step,loss_root,loss_id,loss_ood\n";
  const auto& steps = curves.at("root").steps;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    csv << steps[i] << ',' << num(curves.at("root").values[i]) << ',' << num(curves.at("id").values[i]) << ','
        << num(curves.at("ood").values[i]) << '\n';
  }
  io::write_text(dir / "eval.csv", csv.str());

  const Transformer<float> model(spec.arch);
  const auto params = man.load_params(man.checkpoints.back().step);
  std::ostringstream per_token;
  per_token << "eval_set,k,loss\n";
  for (const char* id : {"id", "ood"}) {
    const auto& data = named.at(id);
    const Eigen::MatrixXd preds = model.forward(params, make_batch<float>(data)).template cast<double>();
    for (int k = 1; k <= spec.data.K; ++k) {
      per_token << id << ',' << k << ',' << num(per_token_loss(preds, data, k)) << '\n';
    }
  }
  io::write_text(dir / "per_token.csv", per_token.str());
  io::write_text(stamp, json({{"key", key}}).dump(2) + "\n");
}

// ---- PCA ------------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::vector<double>>> predictor_rows(const ExperimentSpec& spec,
                                                                         const Dataset& features) {
  TaskPool pool(spec.data.pool_seed, spec.data.D);
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  for (const auto& m : spec.diversities) {
    // The posterior mean under the Gaussian task prior is the ridge predictor.
    rows.emplace_back("dmmse_" + m.label(),
                      m.is_infinite()
                          ? predictor_row(features, PredictorKind::ridge, {}, spec.data.noise_var)
                          : predictor_row(features, PredictorKind::dmmse, pool.prefix(m.value()), spec.data.noise_var));
  }
  rows.emplace_back("ridge", predictor_row(features, PredictorKind::ridge, {}, spec.data.noise_var));
  return rows;
}

std::string pc_header(int v) {
  std::string h;
  for (int i = 1; i <= v; ++i) h += ",pc" + std::to_string(i);
  return h;
}

}  // namespace

json run_pca(const ExperimentSpec& spec, const EvalSets& sets) {
  const auto study = spec.study_dir();
  const auto dir = study / "pca";
  fs::create_directories(dir / "rows");
  const int B = spec.pca.batch;
  const int K = spec.data.K;
  const int v = spec.pca.components;
  const Dataset features(sets.root.begin(), sets.root.begin() + B);
  const auto selection =
      checkpoint_schedule(spec.train.steps, spec.train.checkpoint_log_points, spec.train.checkpoint_stride,
                          spec.pca.checkpoints);

  const Transformer<float> model(spec.arch);
  std::vector<TrajectoryMatrix> blocks;
  json missing = json::array();
  for (const auto& m : spec.diversities) {
    if (!run_is_complete(spec, m)) {
      missing.push_back(m.label());
      continue;
    }
    const auto man = RunManifest::load(spec.run_dir(m));
    TrajectoryMatrix traj;
    traj.diversity = m.label();
    for (const auto& c : man.checkpoints) {
      if (selection.contains(c.step)) traj.steps.push_back(c.step);
    }
    traj.rows.resize(static_cast<Eigen::Index>(traj.steps.size()), static_cast<Eigen::Index>(B) * K);
    for (std::size_t r = 0; r < traj.steps.size(); ++r) {
      const auto row = encode_function(model, man.load_params(traj.steps[r]), features);
      traj.rows.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), row.size());
    }
    blocks.push_back(std::move(traj));
  }
  if (blocks.empty()) throw ManifestError("no completed runs to analyze");

  const auto joint = build_joint(blocks);
  SvdOptions options;
  options.components = v;
  options.seed = Rng(spec.seed).derive("pca").next_u64();
  const auto sub = center_and_svd(joint, options);

  std::ostringstream ev;
  ev << "component,singular_value,explained_variance\n";
  for (Eigen::Index i = 0; i < sub.singular_values.size(); ++i) {
    ev << i + 1 << ',' << num(sub.singular_values[i]) << ',' << num(sub.explained_variance[i]) << '\n';
  }
  io::write_text(dir / "explained_variance.csv", ev.str());

  std::ostringstream tr;
  tr << "diversity,step" << pc_header(v) << '\n';
  for (const auto& traj : blocks) {
    const auto curve = project_trajectory(traj, sub);
    for (std::size_t r = 0; r < curve.steps.size(); ++r) {
      tr << curve.diversity << ',' << curve.steps[r];
      for (int i = 0; i < v; ++i) tr << ',' << num(curve.points(static_cast<Eigen::Index>(r), i));
      tr << '\n';
    }
  }
  io::write_text(dir / "trajectories.csv", tr.str());

  std::ostringstream ld;
  ld << "component,k,value\n";
  for (int i = 1; i <= v; ++i) {
    for (int k = 1; k <= K; ++k) ld << i << ',' << k << ',' << num(average_loading_magnitude(sub, i, k, B, K)) << '\n';
  }
  io::write_text(dir / "loadings.csv", ld.str());

  std::ostringstream pr;
  pr << "predictor" << pc_header(v) << '\n';
  for (const auto& [name, row] : predictor_rows(spec, features)) {
    io::write_row(dir / "rows" / (name + ".row"), row);
    write_predictor_csv(dir / "rows" / (name + ".csv"), row, K);
    const auto point = project(row, sub);
    pr << name;
    for (int i = 0; i < v; ++i) pr << ',' << num(point[i]);
    pr << '\n';
  }
  io::write_text(dir / "predictors.csv", pr.str());

  json ev_list = json::array();
  for (Eigen::Index i = 0; i < sub.explained_variance.size(); ++i) ev_list.push_back(num_or_null(sub.explained_variance[i]));
  json block_info = json::array();
  for (const auto& b : joint.blocks) block_info.push_back({{"diversity", b.diversity}, {"rows", b.num_rows}});
  json summary = {{"batch", B},
                  {"components", v},
                  {"checkpoints", checkpoint_set_name(spec.pca.checkpoints)},
                  {"randomized", sub.randomized},
                  {"explained_variance", ev_list},
                  {"blocks", block_info},
                  {"missing", missing},
                  {"files",
                   {{"explained_variance", file_ref(study, dir / "explained_variance.csv")},
                    {"trajectories", file_ref(study, dir / "trajectories.csv")},
                    {"loadings", file_ref(study, dir / "loadings.csv")},
                    {"predictors", file_ref(study, dir / "predictors.csv")}}}};
  io::write_text(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---- LLC ------------------------------------------------------------------

namespace {

SGLDConfig sgld_for(const ExperimentSpec& spec, const TaskDiversity& m, std::int64_t step) {
  SGLDConfig cfg = spec.llc.sgld;
  cfg.seed = Rng(spec.llc.sgld.seed).derive(m.label()).derive(static_cast<std::uint64_t>(step)).key();
  return cfg;
}

json estimate_json(const LLCEstimate& est) {
  json means = json::array();
  for (double x : est.chain_means) means.push_back(num_or_null(x));
  json gz = json::array();
  json rp = json::array();
  json dv = json::array();
  for (const auto& z : est.diagnostics.geweke_z) gz.push_back(optional_json(z));
  for (const auto& r : est.diagnostics.rpd_percent) rp.push_back(optional_json(r));
  for (bool d : est.diagnostics.diverged) dv.push_back(d);
  return {{"lambda_hat", num_or_null(est.lambda_hat)},
          {"reference_loss", num_or_null(est.reference_loss)},
          {"chain_means", means},
          {"diagnostics",
           {{"geweke_z", gz},
            {"rpd_percent", rp},
            {"gelman_rubin", optional_json(est.diagnostics.gelman_rubin)},
            {"diverged", dv}}}};
}

void write_traces(const fs::path& path, const LLCEstimate& est) {
  std::ostringstream out;
  out << "chain,draw,loss,distance\n";
  for (std::size_t c = 0; c < est.traces.size(); ++c) {
    const auto& t = est.traces[c];
    for (std::size_t i = 0; i < t.losses.size(); ++i) {
      out << c << ',' << i << ',' << num(t.losses[i]) << ',' << num(t.distances[i]) << '\n';
    }
  }
  io::write_text(path, out.str());
}

// Estimate at one checkpoint; writes <stem>.json and <stem>_traces.csv.
json estimate_checkpoint(const ExperimentSpec& spec, const TaskDiversity& m, const fs::path& ckpt_path,
                         std::int64_t step, const fs::path& stem, const fs::path& study) {
  const auto cfg = sgld_for(spec, m, step);
  const auto hash = io::file_hash(ckpt_path);
  const auto json_path = fs::path(stem.string() + ".json");
  const auto trace_path = fs::path(stem.string() + "_traces.csv");
  if (fs::exists(json_path) && fs::exists(trace_path)) {
    try {
      const auto old = json::parse(io::read_text(json_path));
      if (old.at("checkpoint").at("hash") == hash && old.at("sgld") == sgld_json(cfg)) return old;
    } catch (const std::exception&) {
    }
  }
  const auto params = read_checkpoint(ckpt_path, spec.arch);
  const std::vector<double> w(params.begin(), params.end());
  const TransformerOracle oracle(spec.arch, spec.data, m);
  json checkpoint = {{"file", fs::relative(ckpt_path, study).generic_string()}, {"step", step}, {"hash", hash}};
  json out;
  try {
    const auto est = estimate_llc(w, oracle, cfg);
    out = estimate_json(est);
    write_traces(trace_path, est);
  } catch (const EstimationFailure& e) {
    out = {{"lambda_hat", nullptr}, {"error", e.what()}};
    io::write_text(trace_path, "chain,draw,loss,distance\n");
  }
  out["diversity"] = m.label();
  out["checkpoint"] = checkpoint;
  out["sgld"] = sgld_json(cfg);
  io::write_text(json_path, out.dump(2) + "\n");
  return out;
}

}  // namespace

json llc_at_checkpoint(const fs::path& checkpoint, const ExperimentSpec& spec, const TaskDiversity& m,
                       const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::int64_t step = 0;
  read_checkpoint(checkpoint, spec.arch, &step);
  return estimate_checkpoint(spec, m, checkpoint, step, out_dir / "estimate", out_dir);
}

json run_llc(const ExperimentSpec& spec, const TaskDiversity& m) {
  const auto study = spec.study_dir();
  const auto dir = study / "llc";
  fs::create_directories(dir);
  const auto man = load_complete(spec, m);
  const auto& last = man.checkpoints.back();
  auto result = estimate_checkpoint(spec, m, man.run_dir / last.path, last.step, dir / m.label(), study);

  if (spec.llc.every_checkpoint) {
    const auto over_dir = dir / (m.label() + "_over_time");
    fs::create_directories(over_dir);
    std::ostringstream csv;
    csv << "step,lambda_hat\n";
    for (std::size_t i = 0; i < man.checkpoints.size(); i += static_cast<std::size_t>(spec.llc.checkpoint_stride)) {
      const auto& c = man.checkpoints[i];
      const auto est = estimate_checkpoint(spec, m, man.run_dir / c.path, c.step,
                                           over_dir / ("step_" + std::to_string(c.step)), study);
      const auto& lh = est.at("lambda_hat");
      csv << c.step << ',' << (lh.is_number() ? num(lh.get<double>()) : kMissing) << '\n';
    }
    io::write_text(dir / (m.label() + "_over_time.csv"), csv.str());
  }
  return result;
}

void run_calibration(const ExperimentSpec& spec, const TaskDiversity& m) {
  if (spec.llc.step_grid.empty() || spec.llc.nbeta_grid.empty()) {
    throw ConfigError("llc.step_grid and llc.nbeta_grid must be set for a calibration sweep");
  }
  const auto dir = spec.study_dir() / "llc";
  fs::create_directories(dir);
  const auto man = load_complete(spec, m);
  const auto& last = man.checkpoints.back();
  const auto params = man.load_params(last.step);
  const std::vector<double> w(params.begin(), params.end());
  const TransformerOracle oracle(spec.arch, spec.data, m);
  const auto cells =
      calibration_sweep(w, oracle, spec.llc.step_grid, spec.llc.nbeta_grid, sgld_for(spec, m, last.step));
  std::ostringstream csv;
  csv << "step_size,nbeta,lambda_hat,diverged_chains\n";
  for (const auto& c : cells) {
    csv << num(c.step_size) << ',' << num(c.nbeta) << ',' << (c.lambda_hat ? num(*c.lambda_hat) : kMissing) << ','
        << c.diverged_chains << '\n';
  }
  io::write_text(dir / (m.label() + "_calibration.csv"), csv.str());
}

// ---- study ----------------------------------------------------------------

namespace {

struct EvalCsv {
  std::vector<std::int64_t> steps;
  std::vector<double> root, id, ood;
};

EvalCsv read_eval_csv(const fs::path& path) {
  EvalCsv out;
  const auto rows = read_csv(path);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 4) throw MalformedInput(path.string() + ": bad row");
    out.steps.push_back(std::stoll(rows[i][0]));
    out.root.push_back(parse_num(rows[i][1]));
    out.id.push_back(parse_num(rows[i][2]));
    out.ood.push_back(parse_num(rows[i][3]));
  }
  return out;
}

// Reference losses of dMMSE_M and ridge on D^(M) and D^(inf), per token and averaged.
void write_references(const ExperimentSpec& spec, const EvalSets& sets, const fs::path& path) {
  TaskPool pool(spec.data.pool_seed, spec.data.D);
  const int K = spec.data.K;
  std::ostringstream csv;
  csv << "diversity,eval_set,predictor,k,loss\n";
  auto emit = [&](const std::string& label, const char* set, const char* predictor, const Dataset& data,
                  const std::vector<double>& row) {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> preds(
        row.data(), static_cast<Eigen::Index>(data.size()), K);
    const Eigen::MatrixXd p = preds;
    csv << label << ',' << set << ',' << predictor << ",all," << num(empirical_loss(p, data)) << '\n';
    for (int k = 1; k <= K; ++k) {
      csv << label << ',' << set << ',' << predictor << ',' << k << ',' << num(per_token_loss(p, data, k)) << '\n';
    }
  };
  for (const auto& m : spec.diversities) {
    for (const char* set : {"id", "ood"}) {
      const Dataset& data = std::string(set) == "id" ? sets.in_distribution.at(m.label()) : sets.ood;
      const auto ridge = predictor_row(data, PredictorKind::ridge, {}, spec.data.noise_var);
      const auto dmmse = m.is_infinite()
                             ? ridge
                             : predictor_row(data, PredictorKind::dmmse, pool.prefix(m.value()), spec.data.noise_var);
      emit(m.label(), set, "dmmse", data, dmmse);
      emit(m.label(), set, "ridge", data, ridge);
    }
  }
  io::write_text(path, csv.str());
}

json missing_cell(const std::string& reason) { return {{"missing", true}, {"reason", reason}}; }

}  // namespace

json run_study(const ExperimentSpec& spec, bool verbose) {
  const auto study = spec.study_dir();
  fs::create_directories(study);
  io::write_text(study / "spec.json", spec_json(spec).dump(2) + "\n");

  log_line(verbose, "sampling evaluation sets");
  const auto sets = make_eval_sets(spec);
  write_eval_sets(spec, sets);

  auto failures = run_sweep(spec, verbose);

  for (const auto& m : spec.diversities) {
    if (failures.count(m.label())) continue;
    try {
      log_line(verbose, "[" + m.label() + "] evaluating checkpoints");
      evaluate_run(spec, m, sets);
    } catch (const std::exception& e) {
      failures[m.label()] = e.what();
    }
  }

  json pca;
  try {
    log_line(verbose, "joint trajectory PCA");
    pca = run_pca(spec, sets);
  } catch (const std::exception& e) {
    pca = missing_cell(e.what());
  }

  log_line(verbose, "predictor reference losses");
  const auto refs_path = study / "references.csv";
  write_references(spec, sets, refs_path);

  std::map<std::string, json> llc;
  std::mutex llc_mutex;
  parallel_for(spec.diversities.size(), worker_count(spec), [&](std::size_t i) {
    const auto& m = spec.diversities[i];
    json result;
    if (failures.count(m.label())) {
      result = missing_cell("run failed");
    } else {
      try {
        log_line(verbose, "[" + m.label() + "] LLC");
        result = run_llc(spec, m);
      } catch (const std::exception& e) {
        result = missing_cell(e.what());
      }
    }
    std::lock_guard lock(llc_mutex);
    llc[m.label()] = result;
  });

  // Reference losses keyed by (diversity, set, predictor) for k = all.
  std::map<std::string, double> ref;
  for (const auto& row : read_csv(refs_path)) {
    if (row.size() == 5 && row[3] == "all") ref[row[0] + "/" + row[1] + "/" + row[2]] = parse_num(row[4]);
  }
  const json refs_source = file_ref(study, refs_path);

  json runs = json::object();
  for (const auto& m : spec.diversities) {
    const auto label = m.label();
    if (failures.count(label)) {
      runs[label] = missing_cell(failures.at(label));
      continue;
    }
    const auto dir = spec.run_dir(m);
    const auto man = RunManifest::load(dir);
    const auto eval = read_eval_csv(dir / "eval.csv");
    const json eval_source = file_ref(study, dir / "eval.csv");
    LossCurve ood_curve{eval.steps, eval.ood, "ood"};
    const auto& last = man.checkpoints.back();
    json row = {
        {"final_step", last.step},
        {"checkpoint", {{"file", fs::relative(dir / last.path, study).generic_string()}, {"hash", last.hash}}},
        {"final_loss", {{"id", num_or_null(eval.id.back())}, {"ood", num_or_null(eval.ood.back())}, {"source", eval_source}}},
        {"dmmse_loss",
         {{"id", num_or_null(ref.at(label + "/id/dmmse"))},
          {"ood", num_or_null(ref.at(label + "/ood/dmmse"))},
          {"source", refs_source}}},
        {"ridge_loss",
         {{"id", num_or_null(ref.at(label + "/id/ridge"))},
          {"ood", num_or_null(ref.at(label + "/ood/ridge"))},
          {"source", refs_source}}},
        {"t_crit", {{"step", critical_time(ood_curve, spec.smoothing_std)}, {"smoothing_std", spec.smoothing_std},
                    {"source", eval_source}}},
        {"per_token", file_ref(study, dir / "per_token.csv")},
    };
    const auto& l = llc.at(label);
    if (l.contains("missing") || !l.at("lambda_hat").is_number()) {
      row["lambda_hat"] = missing_cell(l.value("reason", l.value("error", "estimation failed")));
    } else {
      row["lambda_hat"] = {{"value", l.at("lambda_hat")}, {"source", file_ref(study, study / "llc" / (label + ".json"))}};
    }
    runs[label] = row;
  }

  json lambda_inf = missing_cell("no infinite-diversity run in the sweep");
  if (runs.contains("inf") && runs["inf"].contains("lambda_hat")) lambda_inf = runs["inf"]["lambda_hat"];

  json div = json::array();
  for (const auto& m : spec.diversities) div.push_back(m.label());
  json report = {{"study", spec.name},
                 {"spec", file_ref(study, study / "spec.json")},
                 {"eval_sets", file_ref(study, study / "eval" / "manifest.json")},
                 {"diversities", div},
                 {"runs", runs},
                 {"lambda_inf", lambda_inf},
                 {"pca", pca}};
  io::write_text(study / "report.json", report.dump(2) + "\n");
  return report;
}

// ---- figure data ----------------------------------------------------------

std::vector<fs::path> export_figure_data(const ExperimentSpec& spec, const std::string& which) {
  static const std::vector<std::string> kinds = {"ood",  "pca",      "final_loss", "llc",
                                                 "loadings", "per_token", "llc_time"};
  if (which != "all" && std::find(kinds.begin(), kinds.end(), which) == kinds.end()) {
    throw ConfigError("unknown figure '" + which + "'");
  }
  const auto study = spec.study_dir();
  const auto dir = study / "figures";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  auto want = [&](const char* kind) { return which == "all" || which == kind; };
  auto emit = [&](const char* name, const std::string& text) {
    io::write_text(dir / name, text);
    written.push_back(dir / name);
  };

  if (want("ood")) {
    std::ostringstream out;
    out << "diversity,step,raw_loss,smoothed_loss\n";
    for (const auto& m : spec.diversities) {
      const auto path = spec.run_dir(m) / "eval.csv";
      if (!fs::exists(path)) {
        out << m.label() << ',' << kMissing << ',' << kMissing << ',' << kMissing << '\n';
        continue;
      }
      const auto eval = read_eval_csv(path);
      const auto smooth = gaussian_smooth(eval.ood, spec.smoothing_std);
      for (std::size_t i = 0; i < eval.steps.size(); ++i) {
        out << m.label() << ',' << eval.steps[i] << ',' << num(eval.ood[i]) << ',' << num(smooth[i]) << '\n';
      }
    }
    emit("ood_loss.csv", out.str());
  }

  if (want("pca")) {
    const int v = spec.pca.components;
    const auto traj = study / "pca" / "trajectories.csv";
    std::ostringstream out;
    out << "diversity,step" << pc_header(v) << '\n';
    std::set<std::string> seen;
    if (fs::exists(traj)) {
      const auto rows = read_csv(traj);
      for (std::size_t i = 1; i < rows.size(); ++i) {
        seen.insert(rows[i][0]);
        for (std::size_t j = 0; j < rows[i].size(); ++j) out << (j ? "," : "") << rows[i][j];
        out << '\n';
      }
    }
    for (const auto& m : spec.diversities) {
      if (seen.count(m.label())) continue;
      out << m.label() << ',' << kMissing;
      for (int i = 0; i < v; ++i) out << ',' << kMissing;
      out << '\n';
    }
    emit("pca_trajectories.csv", out.str());

    std::ostringstream pts;
    pts << "predictor" << pc_header(v) << '\n';
    const auto pred = study / "pca" / "predictors.csv";
    std::map<std::string, std::vector<std::string>> by_name;
    if (fs::exists(pred)) {
      const auto rows = read_csv(pred);
      for (std::size_t i = 1; i < rows.size(); ++i) by_name[rows[i][0]] = rows[i];
    }
    std::vector<std::string> names;
    for (const auto& m : spec.diversities) names.push_back("dmmse_" + m.label());
    names.push_back("ridge");
    for (const auto& name : names) {
      pts << name;
      const auto it = by_name.find(name);
      for (int i = 0; i < v; ++i) {
        pts << ',' << (it == by_name.end() ? std::string(kMissing) : it->second.at(static_cast<std::size_t>(i) + 1));
      }
      pts << '\n';
    }
    emit("pca_predictors.csv", pts.str());
  }

  json report;
  const auto report_path = study / "report.json";
  if (fs::exists(report_path)) report = json::parse(io::read_text(report_path));
  auto cell = [&](const std::string& label, const char* field, const char* sub) -> std::string {
    if (!report.contains("runs") || !report["runs"].contains(label)) return kMissing;
    const auto& r = report["runs"][label];
    if (!r.contains(field)) return kMissing;
    const auto& f = r[field];
    if (!f.contains(sub) || !f[sub].is_number()) return kMissing;
    return num(f[sub].get<double>());
  };

  if (want("final_loss")) {
    std::ostringstream out;
    out << "diversity,transformer_id,transformer_ood,dmmse_id,dmmse_ood,ridge_id,ridge_ood\n";
    for (const auto& m : spec.diversities) {
      const auto l = m.label();
      out << l << ',' << cell(l, "final_loss", "id") << ',' << cell(l, "final_loss", "ood") << ','
          << cell(l, "dmmse_loss", "id") << ',' << cell(l, "dmmse_loss", "ood") << ',' << cell(l, "ridge_loss", "id")
          << ',' << cell(l, "ridge_loss", "ood") << '\n';
    }
    emit("final_loss.csv", out.str());
  }

  if (want("llc")) {
    std::string inf = kMissing;
    if (report.contains("lambda_inf") && report["lambda_inf"].contains("value") &&
        report["lambda_inf"]["value"].is_number()) {
      inf = num(report["lambda_inf"]["value"].get<double>());
    }
    std::ostringstream out;
    out << "diversity,lambda_hat,lambda_inf\n";
    for (const auto& m : spec.diversities) out << m.label() << ',' << cell(m.label(), "lambda_hat", "value") << ',' << inf << '\n';
    emit("final_llc.csv", out.str());
  }

  if (want("loadings")) {
    const auto path = study / "pca" / "loadings.csv";
    std::ostringstream out;
    out << "component,k,value\n";
    if (fs::exists(path)) {
      const auto rows = read_csv(path);
      for (std::size_t i = 1; i < rows.size(); ++i) out << rows[i][0] << ',' << rows[i][1] << ',' << rows[i][2] << '\n';
    } else {
      for (int i = 1; i <= spec.pca.components; ++i) {
        for (int k = 1; k <= spec.data.K; ++k) out << i << ',' << k << ',' << kMissing << '\n';
      }
    }
    emit("loadings.csv", out.str());
  }

  if (want("per_token")) {
    std::map<std::string, std::string> ref;
    const auto refs_path = study / "references.csv";
    if (fs::exists(refs_path)) {
      for (const auto& row : read_csv(refs_path)) {
        if (row.size() == 5) ref[row[0] + "/" + row[1] + "/" + row[2] + "/" + row[3]] = row[4];
      }
    }
    auto lookup = [&](const std::string& key) {
      const auto it = ref.find(key);
      return it == ref.end() ? std::string(kMissing) : it->second;
    };
    std::ostringstream out;
    out << "diversity,eval_set,k,transformer,dmmse,ridge\n";
    for (const auto& m : spec.diversities) {
      const auto l = m.label();
      std::map<std::string, std::string> mine;
      const auto path = spec.run_dir(m) / "per_token.csv";
      if (fs::exists(path)) {
        const auto rows = read_csv(path);
        for (std::size_t i = 1; i < rows.size(); ++i) mine[rows[i][0] + "/" + rows[i][1]] = rows[i][2];
      }
      for (const char* set : {"id", "ood"}) {
        for (int k = 1; k <= spec.data.K; ++k) {
          const auto ks = std::to_string(k);
          const auto it = mine.find(std::string(set) + "/" + ks);
          out << l << ',' << set << ',' << k << ',' << (it == mine.end() ? std::string(kMissing) : it->second) << ','
              << lookup(l + "/" + set + "/dmmse/" + ks) << ',' << lookup(l + "/" + set + "/ridge/" + ks) << '\n';
        }
      }
    }
    emit("per_token_loss.csv", out.str());
  }

  if (want("llc_time")) {
    std::ostringstream out;
    out << "diversity,step,lambda_hat\n";
    for (const auto& m : spec.diversities) {
      const auto path = study / "llc" / (m.label() + "_over_time.csv");
      if (!fs::exists(path)) {
        out << m.label() << ',' << kMissing << ',' << kMissing << '\n';
        continue;
      }
      const auto rows = read_csv(path);
      for (std::size_t i = 1; i < rows.size(); ++i) out << m.label() << ',' << rows[i][0] << ',' << rows[i][1] << '\n';
    }
    emit("llc_over_time.csv", out.str());
  }
  return written;
}

}  // namespace icl
