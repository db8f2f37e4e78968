#include "icl/trajectory_pca.hpp"

#include <cmath>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl {
namespace {

// Flip each column so its largest-magnitude entry (first on ties) is positive.
void fix_signs(Eigen::MatrixXd& loadings) {
  for (Eigen::Index c = 0; c < loadings.cols(); ++c) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index r = 0; r < loadings.rows(); ++r) {
      const double a = std::abs(loadings(r, c));
      if (a > best_abs) {
        best_abs = a;
        best = r;
      }
    }
    if (loadings(best, c) < 0) loadings.col(c) *= -1.0;
  }
}

}  // namespace

std::vector<double> encode_function(const Transformer<float>& model, std::span<const float> params,
                                    const Dataset& eval_data) {
  const auto batch = make_batch<float>(eval_data);
  const auto preds = model.forward(params, batch);
  std::vector<double> row(preds.size());
  // preds is row-major B x K, which is exactly the sequence-major order.
  for (Eigen::Index i = 0; i < preds.size(); ++i) row[i] = preds.data()[i];
  return row;
}

JointMatrix build_joint(std::span<const TrajectoryMatrix> blocks) {
  if (blocks.empty()) throw MalformedInput("joint matrix needs at least one trajectory");
  const auto cols = blocks.front().rows.cols();
  Eigen::Index total = 0;
  for (const auto& b : blocks) {
    if (b.rows.cols() != cols) throw MalformedInput("trajectory row lengths differ");
    if (static_cast<std::size_t>(b.rows.rows()) != b.steps.size()) {
      throw MalformedInput("trajectory for M=" + b.diversity + " has mismatched step list");
    }
    total += b.rows.rows();
  }
  JointMatrix j;
  j.centered.resize(total, cols);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    j.centered.middleRows(at, b.rows.rows()) = b.rows;
    j.blocks.push_back({b.diversity, at, b.rows.rows()});
    at += b.rows.rows();
  }
  j.column_means = j.centered.colwise().mean().transpose();
  j.centered.rowwise() -= j.column_means.transpose();
  return j;
}

void randomized_svd(const Eigen::MatrixXd& a, int rank, int oversampling, int power_iterations,
                    std::uint64_t seed, Eigen::VectorXd& singular_values, Eigen::MatrixXd& right) {
  const Eigen::Index width = std::min<Eigen::Index>(rank + oversampling, std::min(a.rows(), a.cols()));
  Rng rng = Rng(seed).derive("randomized-svd");
  Eigen::MatrixXd omega(a.cols(), width);
  for (Eigen::Index c = 0; c < width; ++c) {
    for (Eigen::Index r = 0; r < a.cols(); ++r) omega(r, c) = rng.normal();
  }
  auto orthonormal = [](const Eigen::MatrixXd& m) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    return Eigen::MatrixXd(qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  };
  Eigen::MatrixXd q = orthonormal(a * omega);
  for (int it = 0; it < power_iterations; ++it) {
    const Eigen::MatrixXd z = orthonormal(a.transpose() * q);
    q = orthonormal(a * z);
  }
  const Eigen::MatrixXd small = q.transpose() * a;  // width x cols
  Eigen::BDCSVD<Eigen::MatrixXd> svd(small, Eigen::ComputeThinV);
  singular_values = svd.singularValues().head(std::min<Eigen::Index>(rank, width));
  right = svd.matrixV().leftCols(singular_values.size());
}

EssentialSubspace center_and_svd(const JointMatrix& joint, const SvdOptions& options) {
  const auto& f = joint.centered;
  if (f.rows() < 2) throw MalformedInput("PCA needs at least two rows");
  if (options.components < 1 || options.components > f.cols()) {
    throw ConfigError("number of components must lie in 1.." + std::to_string(f.cols()));
  }
  // A hand-built JointMatrix may not be centered yet.
  const Eigen::RowVectorXd residual_mean = f.colwise().mean();
  Eigen::MatrixXd centered = f;
  centered.rowwise() -= residual_mean;

  EssentialSubspace s;
  s.column_means = joint.column_means + residual_mean.transpose();
  const double total = centered.squaredNorm();
  Eigen::MatrixXd right;
  if (std::min(f.rows(), f.cols()) <= options.exact_limit) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    s.singular_values = svd.singularValues();
    right = svd.matrixV().leftCols(options.components);
  } else {
    randomized_svd(centered, options.components, options.oversampling, options.power_iterations,
                   options.seed, s.singular_values, right);
    s.randomized = true;
  }
  s.loadings = right;
  fix_signs(s.loadings);
  s.explained_variance = total > 0 ? Eigen::VectorXd(s.singular_values.array().square() / total)
                                   : Eigen::VectorXd::Zero(s.singular_values.size());
  return s;
}

Eigen::VectorXd project(std::span<const double> row, const EssentialSubspace& subspace) {
  if (static_cast<Eigen::Index>(row.size()) != subspace.loadings.rows()) {
    throw MalformedInput("row of length " + std::to_string(row.size()) +
                         " cannot be projected onto loadings of length " +
                         std::to_string(subspace.loadings.rows()));
  }
  const Eigen::Map<const Eigen::VectorXd> y(row.data(), static_cast<Eigen::Index>(row.size()));
  return subspace.loadings.transpose() * (y - subspace.column_means);
}

ProjectedCurve project_trajectory(const TrajectoryMatrix& trajectory,
                                  const EssentialSubspace& subspace) {
  if (trajectory.rows.cols() != subspace.loadings.rows()) {
    throw MalformedInput("trajectory width does not match the loadings");
  }
  ProjectedCurve c{trajectory.diversity, trajectory.steps, {}};
  c.points = (trajectory.rows.rowwise() - subspace.column_means.transpose()) * subspace.loadings;
  return c;
}

std::vector<double> pc_over_time(const ProjectedCurve& curve, int i) {
  if (i < 1 || i > curve.points.cols()) {
    throw MalformedInput("principal component " + std::to_string(i) + " out of range");
  }
  std::vector<double> out(curve.points.rows());
  for (Eigen::Index r = 0; r < curve.points.rows(); ++r) out[r] = curve.points(r, i - 1);
  return out;
}

double average_loading_magnitude(const EssentialSubspace& subspace, int i, int k, int B, int K) {
  if (i < 1 || i > subspace.loadings.cols()) {
    throw MalformedInput("principal component " + std::to_string(i) + " out of range");
  }
  if (k < 1 || k > K) throw MalformedInput("token position " + std::to_string(k) + " out of range");
  if (B < 1 || static_cast<Eigen::Index>(B) * K != subspace.loadings.rows()) {
    throw MalformedInput("B*K does not match the loading length");
  }
  double total = 0.0;
  for (int b = 0; b < B; ++b) total += std::abs(subspace.loadings(static_cast<Eigen::Index>(b) * K + k - 1, i - 1));
  return total / B;
}

std::vector<double> gaussian_smooth(std::span<const double> series, double std_checkpoints) {
  if (!(std_checkpoints >= 0.0)) throw ConfigError("smoothing std must be >= 0");
  std::vector<double> out(series.begin(), series.end());
  if (std_checkpoints == 0.0 || series.empty()) return out;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * std_checkpoints));
  std::vector<double> kernel(2 * radius + 1);
  for (std::ptrdiff_t o = -radius; o <= radius; ++o) {
    const double z = static_cast<double>(o) / std_checkpoints;
    kernel[o + radius] = std::exp(-0.5 * z * z);
  }
  const auto n = static_cast<std::ptrdiff_t>(series.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    double weight = 0.0;
    for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - radius); j <= std::min(n - 1, i + radius); ++j) {
      const double w = kernel[j - i + radius];
      acc += w * series[j];
      weight += w;
    }
    out[i] = acc / weight;
  }
  return out;
}

}  // namespace icl
