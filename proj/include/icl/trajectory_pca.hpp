#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icl/data_gen.hpp"
#include "icl/transformer.hpp"

namespace icl {

/// Function-space rows of one run: row r encodes the checkpoint at steps[r].
struct TrajectoryMatrix {
  std::string diversity;
  std::vector<std::int64_t> steps;
  Eigen::MatrixXd rows;
};

struct JointBlock {
  std::string diversity;
  Eigen::Index first_row = 0;
  Eigen::Index num_rows = 0;
};

/// Vertically stacked trajectory matrices, column-centered.
struct JointMatrix {
  Eigen::MatrixXd centered;
  Eigen::VectorXd column_means;
  std::vector<JointBlock> blocks;
};

struct EssentialSubspace {
  Eigen::MatrixXd loadings;          ///< (B K) x v, orthonormal columns
  Eigen::VectorXd singular_values;   ///< every value computed, non-increasing
  Eigen::VectorXd explained_variance;///< sigma_i^2 / ||F||_F^2, same length
  Eigen::VectorXd column_means;
  bool randomized = false;
};

struct ProjectedCurve {
  std::string diversity;
  std::vector<std::int64_t> steps;
  Eigen::MatrixXd points;  ///< |C| x v
};

struct SvdOptions {
  int components = 2;                 ///< v
  Eigen::Index exact_limit = 4096;    ///< exact SVD when min(rows, cols) <= this
  int oversampling = 10;
  int power_iterations = 2;
  std::uint64_t seed = 0;
};

/// f(D, w): predictions for each sequence and position, sequence-major.
std::vector<double> encode_function(const Transformer<float>& model, std::span<const float> params,
                                    const Dataset& eval_data);

/// Stacks blocks in the given order and subtracts the column means.
JointMatrix build_joint(std::span<const TrajectoryMatrix> blocks);

/// Column-centers when needed (a JointMatrix is already centered), takes the SVD,
/// and keeps the top v right singular vectors. The largest-magnitude entry of every
/// loading column is made positive.
EssentialSubspace center_and_svd(const JointMatrix& joint, const SvdOptions& options = {});

/// Randomized range-finder SVD of `a` (already centered), rank `rank`.
/// Returns singular values and right singular vectors.
void randomized_svd(const Eigen::MatrixXd& a, int rank, int oversampling, int power_iterations,
                    std::uint64_t seed, Eigen::VectorXd& singular_values, Eigen::MatrixXd& right);

/// (row - column_means) V_v.
Eigen::VectorXd project(std::span<const double> row, const EssentialSubspace& subspace);
ProjectedCurve project_trajectory(const TrajectoryMatrix& trajectory, const EssentialSubspace& subspace);

/// Coordinate i (1-based) of the projected curve, one value per checkpoint.
std::vector<double> pc_over_time(const ProjectedCurve& curve, int i);

/// A_{i,k} = (1/B) sum_b |V_{(b-1)K + k, i}| with 1-based i and k.
double average_loading_magnitude(const EssentialSubspace& subspace, int i, int k, int B, int K);

/// Discrete Gaussian smoothing over index, kernel truncated at +-ceil(4 std)
/// and renormalized over the in-range part. std == 0 returns the input.
std::vector<double> gaussian_smooth(std::span<const double> series, double std_checkpoints);

}  // namespace icl
