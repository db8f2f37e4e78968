#include "icl/predictors.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "icl/errors.hpp"

namespace icl {
namespace {

// Online log-sum-exp accumulation of softmax(logits)-weighted task vectors.
// Rescales the running sums whenever a new maximum logit appears.
class SoftmaxMean {
 public:
  explicit SoftmaxMean(Eigen::Index D) : acc_(Eigen::VectorXd::Zero(D)) {}

  void add(double logit, const TaskVector& task) {
    if (logit > max_) {
      const double scale = std::exp(max_ - logit);  // 0 on the first call
      acc_ *= scale;
      total_ *= scale;
      max_ = logit;
    }
    const double w = std::exp(logit - max_);
    acc_.noalias() += w * task;
    total_ += w;
  }

  Eigen::VectorXd mean() const { return acc_ / total_; }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double total_ = 0.0;
  Eigen::VectorXd acc_;
};

void check_noise(double noise_var) {
  if (!(noise_var > 0.0)) throw ConfigError("predictors require noise_var > 0");
}

}  // namespace

ContextWindow ContextWindow::of(const RegressionSequence& seq, int k) {
  if (k < 1 || k > seq.K()) {
    throw MalformedInput("context position " + std::to_string(k) + " outside 1.." +
                         std::to_string(seq.K()));
  }
  return {seq.xs.topRows(k - 1), seq.ys.head(k - 1), seq.xs.row(k - 1).transpose()};
}

TaskEstimate dmmse_task_estimate(const ContextWindow& ctx, std::span<const TaskVector> tasks,
                                 double noise_var) {
  if (tasks.empty()) throw ConfigError("dMMSE needs a non-empty task set");
  check_noise(noise_var);
  const double scale = -0.5 / noise_var;
  SoftmaxMean acc(tasks.front().size());
  for (const auto& t : tasks) {
    if (t.size() != ctx.query.size()) throw MalformedInput("task dimension mismatch");
    const double sse = (ctx.ys - ctx.xs * t).squaredNorm();
    acc.add(scale * sse, t);
  }
  return {acc.mean(), PredictorKind::dmmse, tasks.size()};
}

TaskEstimate ridge_task_estimate(const ContextWindow& ctx, double noise_var) {
  check_noise(noise_var);
  const auto D = ctx.query.size();
  if (ctx.ys.size() == 0) return {Eigen::VectorXd::Zero(D), PredictorKind::ridge, 0};
  Eigen::MatrixXd gram = ctx.xs.transpose() * ctx.xs;
  gram.diagonal().array() += noise_var;
  Eigen::VectorXd rhs = ctx.xs.transpose() * ctx.ys;
  return {gram.llt().solve(rhs), PredictorKind::ridge, 0};
}

double predict(const TaskEstimate& est, const Eigen::VectorXd& query) {
  if (est.theta.size() != query.size()) {
    throw MalformedInput("estimate has dimension " + std::to_string(est.theta.size()) +
                         " but query has " + std::to_string(query.size()));
  }
  return est.theta.dot(query);
}

std::vector<double> predictor_row(const Dataset& data, PredictorKind kind,
                                  std::span<const TaskVector> tasks, double noise_var) {
  check_noise(noise_var);
  if (data.empty()) return {};
  const int K = data.front().K();
  for (const auto& s : data) {
    if (s.K() != K) throw MalformedInput("predictor_row needs sequences of equal length");
  }
  std::vector<double> row;
  row.reserve(data.size() * K);

  if (kind == PredictorKind::ridge) {
    for (const auto& s : data) {
      for (int k = 1; k <= K; ++k) {
        const auto ctx = ContextWindow::of(s, k);
        row.push_back(predict(ridge_task_estimate(ctx, noise_var), ctx.query));
      }
    }
    return row;
  }

  if (tasks.empty()) throw ConfigError("dMMSE needs a non-empty task set");
  const double scale = -0.5 / noise_var;
  std::vector<double> sse(tasks.size());
  for (const auto& s : data) {
    std::fill(sse.begin(), sse.end(), 0.0);
    for (int k = 1; k <= K; ++k) {
      const Eigen::VectorXd query = s.xs.row(k - 1).transpose();
      SoftmaxMean acc(query.size());
      for (std::size_t m = 0; m < tasks.size(); ++m) acc.add(scale * sse[m], tasks[m]);
      row.push_back(acc.mean().dot(query));
      // Fold pair k into the residual sums used from position k+1 on.
      for (std::size_t m = 0; m < tasks.size(); ++m) {
        const double r = s.ys[k - 1] - query.dot(tasks[m]);
        sse[m] += r * r;
      }
    }
  }
  return row;
}

void write_predictor_csv(const std::filesystem::path& path, std::span<const double> row, int K) {
  if (K < 1 || row.size() % K != 0) throw MalformedInput("row length is not a multiple of K");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out.precision(17);
  out << "row_id,k,value\n";
  for (std::size_t j = 0; j < row.size(); ++j) {
    out << j / K << ',' << j % K + 1 << ',' << row[j] << '\n';
  }
}

}  // namespace icl
