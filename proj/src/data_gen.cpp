#include "icl/data_gen.hpp"

#include <charconv>

#include "icl/binary_io.hpp"
#include "icl/errors.hpp"

namespace icl {

void DataConfig::validate() const {
  if (D < 1) throw ConfigError("data.D must be >= 1 (got " + std::to_string(D) + ")");
  if (K < 1) throw ConfigError("data.K must be >= 1 (got " + std::to_string(K) + ")");
  if (!(noise_var >= 0.0)) {
    throw ConfigError("data.noise_var must be >= 0 (got " + std::to_string(noise_var) + ")");
  }
}

TaskDiversity TaskDiversity::finite(std::uint64_t m) {
  if (m < 1) throw ConfigError("task diversity must be >= 1");
  TaskDiversity d;
  d.value_ = m;
  return d;
}

TaskDiversity TaskDiversity::parse(const std::string& text) {
  if (text == "inf" || text == "infinity" || text == "\xe2\x88\x9e" || text == "INF") {
    return infinite();
  }
  std::uint64_t m = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, m);
  if (ec != std::errc{} || ptr != end || m < 1) {
    throw ConfigError("invalid task diversity '" + text + "'");
  }
  return finite(m);
}

std::uint64_t TaskDiversity::value() const {
  if (!value_) throw ConfigError("infinite task diversity has no finite value");
  return *value_;
}

std::string TaskDiversity::label() const {
  return value_ ? std::to_string(*value_) : std::string("inf");
}

bool operator<(const TaskDiversity& a, const TaskDiversity& b) {
  if (a.is_infinite()) return false;
  if (b.is_infinite()) return true;
  return a.value() < b.value();
}

TaskPool::TaskPool(std::uint64_t seed, int D)
    : seed_(seed), D_(D), stream_(Rng(seed).derive("task-pool")) {
  if (D < 1) throw ConfigError("task pool dimension must be >= 1");
}

TaskVector TaskPool::task(std::uint64_t m) const {
  Rng r = stream_.derive(m);
  TaskVector t(D_);
  for (int i = 0; i < D_; ++i) t[i] = r.normal();
  return t;
}

const std::vector<TaskVector>& TaskPool::prefix(std::size_t M) {
  realized_.reserve(M);
  while (realized_.size() < M) realized_.push_back(task(realized_.size()));
  return realized_;
}

TaskVector sample_task(const TaskDiversity& diversity, std::span<const TaskVector> prefix, int D,
                       Rng& rng) {
  if (diversity.is_infinite()) {
    TaskVector t(D);
    for (int i = 0; i < D; ++i) t[i] = rng.normal();
    return t;
  }
  const auto M = diversity.value();
  if (prefix.size() < M) throw ConfigError("task prefix shorter than the task diversity");
  return prefix[rng.below(M)];
}

TaskVector sample_task(const TaskDiversity& diversity, TaskPool& pool, Rng& rng) {
  if (diversity.is_infinite()) return sample_task(diversity, {}, pool.dimension(), rng);
  return sample_task(diversity, pool.prefix(diversity.value()), pool.dimension(), rng);
}

RegressionSequence sample_sequence(const TaskVector& task, const DataConfig& cfg, Rng& rng) {
  if (task.size() != cfg.D) {
    throw MalformedInput("task dimension " + std::to_string(task.size()) +
                         " does not match D=" + std::to_string(cfg.D));
  }
  RegressionSequence s;
  s.task = task;
  s.xs.resize(cfg.K, cfg.D);
  s.ys.resize(cfg.K);
  const double noise_sd = std::sqrt(cfg.noise_var);
  for (int k = 0; k < cfg.K; ++k) {
    for (int d = 0; d < cfg.D; ++d) s.xs(k, d) = rng.normal();
  }
  for (int k = 0; k < cfg.K; ++k) {
    s.ys[k] = s.xs.row(k).dot(task) + noise_sd * rng.normal();
  }
  return s;
}

Dataset sample_dataset(const TaskDiversity& diversity, std::size_t n, const DataConfig& cfg,
                       TaskPool& pool, const Rng& rng) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  if (pool.dimension() != cfg.D) throw ConfigError("task pool dimension does not match data.D");
  if (diversity.is_infinite()) return sample_dataset(diversity, n, cfg, {}, rng);
  return sample_dataset(diversity, n, cfg, pool.prefix(diversity.value()), rng);
}

Dataset sample_dataset(const TaskDiversity& diversity, std::size_t n, const DataConfig& cfg,
                       std::span<const TaskVector> prefix, const Rng& rng) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Rng seq_stream = rng.derive(i);
    Rng task_rng = seq_stream.derive("task");
    Rng seq_rng = seq_stream.derive("sequence");
    out.push_back(sample_sequence(sample_task(diversity, prefix, cfg.D, task_rng), cfg, seq_rng));
  }
  return out;
}

TokenizedSequence tokenize(const RegressionSequence& seq) {
  const int K = seq.K();
  const int D = seq.D();
  TokenizedSequence t;
  t.tokens = Eigen::MatrixXd::Zero(2 * K, D + 1);
  for (int k = 0; k < K; ++k) {
    t.tokens.block(2 * k, 1, 1, D) = seq.xs.row(k);
    t.tokens(2 * k + 1, 0) = seq.ys[k];
  }
  return t;
}

Eigen::VectorXd extract_predictions(const Eigen::MatrixXd& output_tokens) {
  if (output_tokens.rows() % 2 != 0) {
    throw MalformedInput("expected an even number of output tokens, got " +
                         std::to_string(output_tokens.rows()));
  }
  if (output_tokens.rows() > 0 && output_tokens.cols() < 1) {
    throw MalformedInput("output tokens have no components");
  }
  const auto K = output_tokens.rows() / 2;
  Eigen::VectorXd out(K);
  for (Eigen::Index k = 0; k < K; ++k) out[k] = output_tokens(2 * k, 0);
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::vector<std::uint8_t> out;
  for (const auto& s : data) {
    io::put_f64(out, s.D());
    io::put_f64(out, s.K());
    for (int k = 0; k < s.K(); ++k) {
      for (int d = 0; d < s.D(); ++d) io::put_f64(out, s.xs(k, d));
    }
    for (int k = 0; k < s.K(); ++k) io::put_f64(out, s.ys[k]);
  }
  io::write_file(path, out);
}

Dataset read_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  Dataset data;
  while (r.remaining() > 0) {
    const double Df = r.f64();
    const double Kf = r.f64();
    const int D = static_cast<int>(Df);
    const int K = static_cast<int>(Kf);
    if (D < 1 || K < 1 || D != Df || K != Kf) {
      throw MalformedInput(path.string() + ": bad record header");
    }
    RegressionSequence s;
    s.xs.resize(K, D);
    s.ys.resize(K);
    for (int k = 0; k < K; ++k) {
      for (int d = 0; d < D; ++d) s.xs(k, d) = r.f64();
    }
    for (int k = 0; k < K; ++k) s.ys[k] = r.f64();
    data.push_back(std::move(s));
  }
  return data;
}

}  // namespace icl
