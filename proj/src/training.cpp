#include "icl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "icl/binary_io.hpp"
#include "icl/errors.hpp"
#include "icl/trajectory_pca.hpp"

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(peak_lr > 0)) throw ConfigError("train.peak_lr must be > 0");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("train.adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("train.adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (checkpoint_log_points < 2) throw ConfigError("train.checkpoint_log_points must be >= 2");
  if (checkpoint_stride < 1) throw ConfigError("train.checkpoint_stride must be >= 1");
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

template <typename Scalar>
void adam_step(std::span<Scalar> params, std::span<const Scalar> grad, AdamState<Scalar>& state,
               double lr, const TrainConfig& cfg) {
  const std::size_t n = params.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n) {
    throw MalformedInput("adam_step: parameter, gradient and state lengths differ");
  }
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const std::int64_t t = state.t + 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));

  std::vector<Scalar> m(n), v(n), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(grad[i]) + cfg.weight_decay * static_cast<double>(params[i]);
    const double mi = b1 * static_cast<double>(state.m[i]) + (1.0 - b1) * g;
    const double vi = b2 * static_cast<double>(state.v[i]) + (1.0 - b2) * g * g;
    m[i] = static_cast<Scalar>(mi);
    v[i] = static_cast<Scalar>(vi);
    const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
    p[i] = static_cast<Scalar>(static_cast<double>(params[i]) - update);
    if (!std::isfinite(p[i])) {
      throw NumericalFailure("non-finite Adam update at coordinate " + std::to_string(i));
    }
  }
  std::copy(p.begin(), p.end(), params.begin());
  state.m = std::move(m);
  state.v = std::move(v);
  state.t = t;
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&, double,
                               const TrainConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&,
                                double, const TrainConfig&);

bool CheckpointSchedule::contains(std::int64_t step) const {
  return std::binary_search(steps.begin(), steps.end(), step);
}

CheckpointSchedule checkpoint_schedule(std::int64_t T, std::int64_t N_log, std::int64_t stride,
                                       CheckpointSet which) {
  if (T < 1) throw ConfigError("checkpoint schedule needs T >= 1");
  if (N_log < 2) throw ConfigError("checkpoint schedule needs N_log >= 2");
  if (stride < 1) throw ConfigError("checkpoint schedule needs stride >= 1");
  std::set<std::int64_t> steps{0, T};
  if (which != CheckpointSet::log) {
    for (std::int64_t s = 0; s <= T; s += stride) steps.insert(s);
  }
  if (which != CheckpointSet::linear) {
    const double denom = static_cast<double>(N_log - 1);
    for (std::int64_t j = 0; j < N_log; ++j) {
      const double v = std::pow(static_cast<double>(T), static_cast<double>(j) / denom);
      steps.insert(std::min<std::int64_t>(T, static_cast<std::int64_t>(std::floor(v))));
    }
  }
  return {{steps.begin(), steps.end()}};
}

Eigen::MatrixXd predict_dataset(const ContextPredictor& f, const Dataset& data) {
  if (data.empty()) return {};
  const int K = data.front().K();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(data.size()), K);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int k = 1; k <= K; ++k) out(static_cast<Eigen::Index>(i), k - 1) = f(data[i], k);
  }
  return out;
}

double per_token_loss(const Eigen::MatrixXd& predictions, const Dataset& data, int k) {
  if (predictions.rows() != static_cast<Eigen::Index>(data.size())) {
    throw MalformedInput("prediction rows do not match the dataset size");
  }
  if (data.empty()) throw MalformedInput("empty dataset");
  if (k < 1 || k > predictions.cols()) throw MalformedInput("token position out of range");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double r = predictions(static_cast<Eigen::Index>(i), k - 1) - data[i].ys[k - 1];
    total += r * r;
  }
  return total / static_cast<double>(data.size());
}

double empirical_loss(const Eigen::MatrixXd& predictions, const Dataset& data) {
  const auto K = predictions.cols();
  if (K < 1) throw MalformedInput("no token positions");
  double total = 0.0;
  for (int k = 1; k <= K; ++k) total += per_token_loss(predictions, data, k);
  return total / static_cast<double>(K);
}

namespace {

constexpr std::string_view kCheckpointMagic{"ICLCKPT\0", 8};
constexpr std::string_view kAdamMagic{"ICLADAM\0", 8};
constexpr std::uint32_t kFormatVersion = 1;

void expect_header(io::Reader& r, std::string_view magic, const ArchConfig& arch,
                   const fs::path& path) {
  if (r.bytes(8) != magic) throw ManifestError(path.string() + ": bad magic bytes");
  if (const auto v = r.u32(); v != kFormatVersion) {
    throw ManifestError(path.string() + ": unsupported format version " + std::to_string(v));
  }
  if (r.u64() != arch.hash()) throw ManifestError(path.string() + ": architecture hash mismatch");
}

std::string step_name(std::int64_t step) {
  std::ostringstream os;
  os << "step_";
  os.width(9);
  os.fill('0');
  os << step;
  return os.str();
}

}  // namespace

void write_checkpoint(const fs::path& path, const ArchConfig& arch, std::int64_t step,
                      std::span<const float> params) {
  std::vector<std::uint8_t> out;
  out.reserve(36 + 4 * params.size());
  io::put_bytes(out, kCheckpointMagic);
  io::put_u32(out, kFormatVersion);
  io::put_u64(out, arch.hash());
  io::put_u64(out, static_cast<std::uint64_t>(step));
  io::put_u64(out, params.size());
  for (float v : params) io::put_f32(out, v);
  io::write_file(path, out);
}

std::vector<float> read_checkpoint(const fs::path& path, const ArchConfig& arch, std::int64_t* step) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  expect_header(r, kCheckpointMagic, arch, path);
  const auto s = static_cast<std::int64_t>(r.u64());
  const auto n = r.u64();
  if (n != ParameterLayout(arch).size() || r.remaining() != 4 * n) {
    throw ManifestError(path.string() + ": parameter count mismatch");
  }
  std::vector<float> params(n);
  for (auto& v : params) v = r.f32();
  if (step) *step = s;
  return params;
}

void write_optimizer_state(const fs::path& path, const ArchConfig& arch, std::int64_t step,
                           const AdamState<float>& state) {
  std::vector<std::uint8_t> out;
  io::put_bytes(out, kAdamMagic);
  io::put_u32(out, kFormatVersion);
  io::put_u64(out, arch.hash());
  io::put_u64(out, static_cast<std::uint64_t>(step));
  io::put_u64(out, static_cast<std::uint64_t>(state.t));
  io::put_u64(out, state.m.size());
  for (float v : state.m) io::put_f32(out, v);
  for (float v : state.v) io::put_f32(out, v);
  io::write_file(path, out);
}

AdamState<float> read_optimizer_state(const fs::path& path, const ArchConfig& arch, std::int64_t step) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  expect_header(r, kAdamMagic, arch, path);
  if (static_cast<std::int64_t>(r.u64()) != step) throw ManifestError(path.string() + ": step mismatch");
  AdamState<float> st;
  st.t = static_cast<std::int64_t>(r.u64());
  const auto n = r.u64();
  if (r.remaining() != 8 * n) throw ManifestError(path.string() + ": optimizer state truncated");
  st.m.resize(n);
  st.v.resize(n);
  for (auto& v : st.m) v = r.f32();
  for (auto& v : st.v) v = r.f32();
  return st;
}

json to_json(const DataConfig& c) {
  return {{"D", c.D}, {"K", c.K}, {"noise_var", c.noise_var}, {"pool_seed", c.pool_seed},
          {"data_seed", c.data_seed}};
}

json to_json(const ArchConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"d_embed", c.d_embed},
          {"d_mlp", c.d_mlp},
          {"context_tokens", c.context_tokens},
          {"token_dim", c.token_dim},
          {"activation", c.activation == Activation::gelu ? "gelu" : "relu"},
          {"attn_output_proj", c.attn_output_proj},
          {"unembedding", "untied"},
          {"hash", io::hex64(c.hash())}};
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch", c.batch},
          {"peak_lr", c.peak_lr},
          {"warmup_steps", c.warmup_steps},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"checkpoint_log_points", c.checkpoint_log_points},
          {"checkpoint_stride", c.checkpoint_stride}};
}

DataConfig data_config_from_json(const json& j) {
  DataConfig c;
  c.D = j.at("D");
  c.K = j.at("K");
  c.noise_var = j.at("noise_var");
  c.pool_seed = j.at("pool_seed");
  c.data_seed = j.at("data_seed");
  return c;
}

ArchConfig arch_config_from_json(const json& j) {
  ArchConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.d_embed = j.at("d_embed");
  c.d_mlp = j.at("d_mlp");
  c.context_tokens = j.at("context_tokens");
  c.token_dim = j.at("token_dim");
  c.activation = j.at("activation") == "relu" ? Activation::relu : Activation::gelu;
  c.attn_output_proj = j.at("attn_output_proj");
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.peak_lr = j.at("peak_lr");
  c.warmup_steps = j.at("warmup_steps");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.weight_decay = j.at("weight_decay");
  c.seed = j.at("seed");
  c.checkpoint_log_points = j.at("checkpoint_log_points");
  c.checkpoint_stride = j.at("checkpoint_stride");
  return c;
}

json RunManifest::to_json() const {
  json cks = json::array();
  for (const auto& c : checkpoints) cks.push_back({{"step", c.step}, {"path", c.path}, {"hash", c.hash}});
  return {{"diversity", diversity},
          {"data", icl::to_json(data)},
          {"arch", icl::to_json(arch)},
          {"train", icl::to_json(train)},
          {"checkpoints", cks},
          {"metrics_path", metrics_path},
          {"status", status},
          {"failure", failure},
          {"last_good_step", last_good_step},
          {"wall_seconds", wall_seconds}};
}

RunManifest RunManifest::from_json(const json& j, const fs::path& run_dir) {
  RunManifest m;
  m.diversity = j.at("diversity");
  m.data = data_config_from_json(j.at("data"));
  m.arch = arch_config_from_json(j.at("arch"));
  m.train = train_config_from_json(j.at("train"));
  for (const auto& c : j.at("checkpoints")) {
    m.checkpoints.push_back({c.at("step"), c.at("path"), c.at("hash")});
  }
  m.metrics_path = j.at("metrics_path");
  m.status = j.at("status");
  m.failure = j.value("failure", "");
  m.last_good_step = j.value("last_good_step", std::int64_t{-1});
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.run_dir = run_dir;
  return m;
}

RunManifest RunManifest::load(const fs::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  if (!fs::exists(path)) throw ManifestError("no manifest at " + path.string());
  return from_json(json::parse(io::read_text(path)), run_dir);
}

void RunManifest::save() const { io::write_text(run_dir / "manifest.json", to_json().dump(2) + "\n"); }

void RunManifest::verify() const {
  for (const auto& c : checkpoints) {
    const auto path = run_dir / c.path;
    if (!fs::exists(path)) throw ManifestError("missing checkpoint " + path.string());
    if (io::file_hash(path) != c.hash) throw ManifestError("hash mismatch for " + path.string());
  }
}

std::vector<float> RunManifest::load_params(std::int64_t step) const {
  for (const auto& c : checkpoints) {
    if (c.step == step) return read_checkpoint(run_dir / c.path, arch);
  }
  throw ManifestError("run " + run_dir.string() + " has no checkpoint at step " + std::to_string(step));
}

Dataset training_batch(const TaskDiversity& diversity, const DataConfig& data, int batch,
                       TaskPool& pool, std::int64_t step) {
  const Rng stream = Rng(data.data_seed).derive("train").derive(static_cast<std::uint64_t>(step));
  return sample_dataset(diversity, static_cast<std::size_t>(batch), data, pool, stream);
}

namespace {

json sidecar(const RunManifest& m, std::int64_t step) {
  return {{"step", step},
          {"diversity", m.diversity},
          {"data", to_json(m.data)},
          {"arch", to_json(m.arch)},
          {"train", to_json(m.train)},
          {"rng",
           {{"scheme", "keyed xoshiro256** sub-streams; batch t = derive(data_seed, 'train', t)"},
            {"data_seed", m.data.data_seed},
            {"pool_seed", m.data.pool_seed},
            {"init_seed", m.train.seed},
            {"next_batch_index", step}}}};
}

// Latest checkpoint step whose parameters and optimizer state are both intact.
std::optional<std::int64_t> resumable_step(const RunManifest& old, const CheckpointSchedule& schedule) {
  for (auto it = old.checkpoints.rbegin(); it != old.checkpoints.rend(); ++it) {
    if (!schedule.contains(it->step)) continue;
    const auto ckpt = old.run_dir / it->path;
    auto opt = ckpt;
    opt.replace_extension(".opt");
    if (fs::exists(ckpt) && fs::exists(opt) && io::file_hash(ckpt) == it->hash) return it->step;
  }
  return std::nullopt;
}

}  // namespace

RunManifest train_run(const TaskDiversity& diversity, const DataConfig& data, const ArchConfig& arch,
                      const TrainConfig& train, const CheckpointSchedule& schedule,
                      const fs::path& run_dir, const TrainOptions& options) {
  data.validate();
  arch.validate();
  train.validate();
  if (arch.token_dim != data.D + 1 || arch.context_tokens != 2 * data.K) {
    throw ConfigError("model token_dim/context_tokens do not match data D/K");
  }
  if (schedule.steps.empty() || schedule.steps.back() > train.steps) {
    throw ConfigError("checkpoint schedule exceeds train.steps");
  }
  const auto start_clock = std::chrono::steady_clock::now();
  fs::create_directories(run_dir / "checkpoints");

  RunManifest m;
  m.diversity = diversity.label();
  m.data = data;
  m.arch = arch;
  m.train = train;
  m.run_dir = run_dir;

  const Transformer<float> model(arch);
  std::vector<float> params;
  AdamState<float> adam;
  std::int64_t start = 0;

  std::optional<std::int64_t> resume_at;
  if (options.resume && fs::exists(run_dir / "manifest.json")) {
    const auto old = RunManifest::load(run_dir);
    if (old.to_json().at("data") == m.to_json().at("data") &&
        old.to_json().at("arch") == m.to_json().at("arch") &&
        old.to_json().at("train") == m.to_json().at("train") && old.diversity == m.diversity) {
      resume_at = resumable_step(old, schedule);
      if (resume_at) {
        for (const auto& c : old.checkpoints) {
          if (c.step <= *resume_at) m.checkpoints.push_back(c);
        }
      }
    }
  }

  const auto metrics_file = run_dir / m.metrics_path;
  std::vector<std::string> kept_metrics;
  if (resume_at) {
    start = *resume_at;
    const auto ckpt = run_dir / "checkpoints" / (step_name(start) + ".ckpt");
    params = read_checkpoint(ckpt, arch);
    auto opt = ckpt;
    opt.replace_extension(".opt");
    adam = read_optimizer_state(opt, arch, start);
    std::ifstream in(metrics_file);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (std::stoll(line.substr(0, line.find(','))) < start) kept_metrics.push_back(line);
    }
  } else {
    const auto init = init_params(arch, train.seed);
    params.assign(init.begin(), init.end());
    adam = AdamState<float>::zeros(params.size());
  }

  {
    std::ofstream out(metrics_file, std::ios::trunc);
    out << "step,train_loss,lr\n";
    for (const auto& line : kept_metrics) out << line << '\n';
  }
  std::ofstream metrics(metrics_file, std::ios::app);
  metrics.precision(9);

  TaskPool pool(data.pool_seed, data.D);
  std::vector<float> grad(params.size());

  auto persist = [&](std::int64_t step) {
    const auto rel = fs::path("checkpoints") / (step_name(step) + ".ckpt");
    write_checkpoint(run_dir / rel, arch, step, params);
    auto opt = run_dir / rel;
    opt.replace_extension(".opt");
    write_optimizer_state(opt, arch, step, adam);
    auto side = run_dir / rel;
    side.replace_extension(".json");
    io::write_text(side, sidecar(m, step).dump(2) + "\n");
    m.checkpoints.push_back({step, rel.generic_string(), io::file_hash(run_dir / rel)});
    m.last_good_step = step;
    metrics.flush();
  };

  m.status = "running";
  if (!resume_at && schedule.contains(0)) persist(0);
  m.last_good_step = start;
  try {
    for (std::int64_t t = start; t < train.steps; ++t) {
      const auto data_batch = training_batch(diversity, data, train.batch, pool, t);
      const auto batch = make_batch<float>(data_batch);
      float loss = 0;
      try {
        loss = model.loss_and_grad(params, batch, grad);
      } catch (const NumericalFailure& e) {
        throw NumericalFailure(std::string(e.what()) + " at step " + std::to_string(t));
      }
      const double lr = lr_at(t + 1, train);
      try {
        adam_step<float>(params, grad, adam, lr, train);
      } catch (const NumericalFailure& e) {
        throw NumericalFailure(std::string(e.what()) + " at step " + std::to_string(t));
      }
      metrics << t << ',' << loss << ',' << lr << '\n';
      if (options.on_step) options.on_step(t, loss);
      if (schedule.contains(t + 1)) persist(t + 1);
    }
  } catch (const NumericalFailure& e) {
    m.status = "failed";
    m.failure = e.what();
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_clock).count();
    m.save();
    throw;
  }
  m.status = "complete";
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_clock).count();
  m.save();
  return m;
}

std::map<std::string, LossCurve> evaluate_checkpoints(const RunManifest& manifest,
                                                      const std::map<std::string, Dataset>& eval_sets) {
  const Transformer<float> model(manifest.arch);
  std::map<std::string, TokenBatch<float>> batches;
  std::map<std::string, LossCurve> curves;
  for (const auto& [id, data] : eval_sets) {
    batches.emplace(id, make_batch<float>(data));
    curves[id].eval_set_id = id;
  }
  for (const auto& c : manifest.checkpoints) {
    const auto path = manifest.run_dir / c.path;
    if (!fs::exists(path)) throw ManifestError("missing checkpoint " + path.string());
    const auto params = read_checkpoint(path, manifest.arch);
    for (const auto& [id, batch] : batches) {
      const Eigen::MatrixXd preds = model.forward(params, batch).template cast<double>();
      curves[id].steps.push_back(c.step);
      curves[id].values.push_back(empirical_loss(preds, eval_sets.at(id)));
    }
  }
  return curves;
}

std::int64_t critical_time(const LossCurve& curve, double smoothing_std) {
  if (curve.values.empty() || curve.values.size() != curve.steps.size()) {
    throw MalformedInput("critical_time needs a non-empty curve");
  }
  const auto smoothed = gaussian_smooth(curve.values, smoothing_std);
  std::size_t best = 0;
  for (std::size_t i = 1; i < smoothed.size(); ++i) {
    if (smoothed[i] < smoothed[best]) best = i;
  }
  return curve.steps[best];
}

}  // namespace icl
