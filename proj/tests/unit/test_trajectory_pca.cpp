#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "icl/errors.hpp"
#include "icl/predictors.hpp"
#include "icl/rng.hpp"
#include "icl/trajectory_pca.hpp"

using namespace icl;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

JointMatrix joint_of(const Eigen::MatrixXd& rows) {
  TrajectoryMatrix t{"m", {}, rows};
  for (Eigen::Index r = 0; r < rows.rows(); ++r) t.steps.push_back(r);
  return build_joint(std::span<const TrajectoryMatrix>(&t, 1));
}

}  // namespace

TEST(CenterAndSvd, TwoByTwoByHand) {
  Eigen::MatrixXd f(2, 2);
  f << 1, 0, -1, 0;
  SvdOptions opts;
  opts.components = 1;
  const auto s = center_and_svd(joint_of(f), opts);
  ASSERT_EQ(s.singular_values.size(), 2);
  EXPECT_NEAR(s.singular_values(0), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(s.singular_values(1), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(s.loadings(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(s.loadings(1, 0), 0.0, 1e-12);
  // Sign convention: the dominant entry is positive.
  EXPECT_GT(s.loadings(0, 0), 0.0);
}

TEST(CenterAndSvd, IdenticalRowsGiveZeroSpectrum) {
  Eigen::MatrixXd f = Eigen::RowVectorXd::LinSpaced(6, -1, 4).replicate(5, 1);
  const auto s = center_and_svd(joint_of(f));
  EXPECT_LT(s.singular_values.maxCoeff(), 1e-12);
  EXPECT_EQ(s.explained_variance.sum(), 0.0);
}

TEST(CenterAndSvd, RankOneExplainsEverything) {
  const Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(7, -3, 3);
  const Eigen::RowVectorXd v = random_matrix(1, 5, 3);
  SvdOptions opts;
  opts.components = 1;
  const auto s = center_and_svd(joint_of(u * v), opts);
  EXPECT_NEAR(s.explained_variance(0), 1.0, 1e-12);
}

TEST(CenterAndSvd, OrthonormalAndProjectionIdentity) {
  const Eigen::MatrixXd f = random_matrix(40, 24, 11);
  const auto joint = joint_of(f);
  for (Eigen::Index c = 0; c < joint.centered.cols(); ++c) {
    EXPECT_NEAR(joint.centered.col(c).mean(), 0.0, 1e-10);
  }
  SvdOptions opts;
  opts.components = 4;
  const auto s = center_and_svd(joint, opts);
  const Eigen::MatrixXd gram = s.loadings.transpose() * s.loadings;
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index i = 1; i < s.singular_values.size(); ++i) {
    EXPECT_LE(s.singular_values(i), s.singular_values(i - 1));
  }
  EXPECT_NEAR(s.explained_variance.sum(), 1.0, 1e-12);

  // Independent reference: U Lambda from a fresh SVD, aligned per column by sign.
  Eigen::JacobiSVD<Eigen::MatrixXd> ref(joint.centered, Eigen::ComputeThinU);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    Eigen::VectorXd y = f.row(r).transpose();
    const auto p = project(std::span<const double>(y.data(), y.size()), s);
    for (int i = 0; i < 4; ++i) {
      const double expect = ref.matrixU()(r, i) * ref.singularValues()(i);
      EXPECT_NEAR(std::abs(p(i)), std::abs(expect), 1e-8);
    }
  }
  const Eigen::VectorXd mean_row = s.column_means;
  EXPECT_LT(project(std::span<const double>(mean_row.data(), mean_row.size()), s).norm(), 1e-12);
}

TEST(CenterAndSvd, DeterministicAcrossReruns) {
  const Eigen::MatrixXd f = random_matrix(30, 12, 5);
  const auto first = center_and_svd(joint_of(f));
  for (int i = 0; i < 5; ++i) {
    const auto again = center_and_svd(joint_of(f));
    EXPECT_EQ(again.loadings, first.loadings);
  }
}

TEST(CenterAndSvd, RowPermutationLeavesLoadingsFixed) {
  const Eigen::MatrixXd f = random_matrix(20, 8, 17);
  Eigen::MatrixXd g = f.colwise().reverse();
  const auto a = center_and_svd(joint_of(f));
  const auto b = center_and_svd(joint_of(g));
  EXPECT_LT((a.loadings - b.loadings).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(CenterAndSvd, RandomizedMatchesExact) {
  // Low-rank signal plus small noise so the top subspace is well separated.
  const Eigen::MatrixXd f = random_matrix(300, 3, 1) * random_matrix(3, 200, 2) * 10.0 +
                            random_matrix(300, 200, 3) * 0.01;
  const auto joint = joint_of(f);
  SvdOptions exact;
  exact.components = 2;
  SvdOptions approx = exact;
  approx.exact_limit = 50;
  approx.seed = 9;
  const auto a = center_and_svd(joint, exact);
  const auto b = center_and_svd(joint, approx);
  EXPECT_FALSE(a.randomized);
  EXPECT_TRUE(b.randomized);
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(b.singular_values(i), a.singular_values(i), 1e-6 * a.singular_values(i));
    EXPECT_NEAR(std::abs(a.loadings.col(i).dot(b.loadings.col(i))), 1.0, 1e-8);
  }
}

TEST(CenterAndSvd, RejectsSingleRowAndBadComponentCount) {
  EXPECT_THROW(center_and_svd(joint_of(random_matrix(1, 4, 1))), MalformedInput);
  SvdOptions opts;
  opts.components = 5;
  EXPECT_THROW(center_and_svd(joint_of(random_matrix(6, 4, 1)), opts), ConfigError);
}

TEST(BuildJoint, RecordsBlocksAndRejectsMismatch) {
  TrajectoryMatrix a{"1", {0, 1}, random_matrix(2, 3, 1)};
  TrajectoryMatrix b{"inf", {0, 5, 9}, random_matrix(3, 3, 2)};
  const std::vector<TrajectoryMatrix> blocks{a, b};
  const auto j = build_joint(blocks);
  ASSERT_EQ(j.blocks.size(), 2u);
  EXPECT_EQ(j.blocks[1].diversity, "inf");
  EXPECT_EQ(j.blocks[1].first_row, 2);
  EXPECT_EQ(j.blocks[1].num_rows, 3);
  TrajectoryMatrix c{"4", {0}, random_matrix(1, 4, 3)};
  const std::vector<TrajectoryMatrix> bad{a, c};
  EXPECT_THROW(build_joint(bad), MalformedInput);
}

TEST(Project, RejectsWrongLength) {
  const auto s = center_and_svd(joint_of(random_matrix(5, 4, 1)));
  const std::vector<double> row(3, 0.0);
  EXPECT_THROW(project(row, s), MalformedInput);
}

TEST(PcOverTime, StationaryTrajectoryIsConstant) {
  const auto s = center_and_svd(joint_of(random_matrix(8, 4, 1)));
  TrajectoryMatrix still{"x", {0, 1, 2, 3}, random_matrix(1, 4, 2).replicate(4, 1)};
  const auto curve = project_trajectory(still, s);
  const auto series = pc_over_time(curve, 1);
  ASSERT_EQ(series.size(), 4u);
  for (double v : series) EXPECT_EQ(v, series.front());
  EXPECT_THROW(pc_over_time(curve, 3), MalformedInput);
}

TEST(AverageLoading, MatchesTwoLoopReference) {
  const int B = 6;
  const int K = 5;
  const Eigen::MatrixXd f = random_matrix(20, B * K, 8);
  SvdOptions opts;
  opts.components = 3;
  const auto s = center_and_svd(joint_of(f), opts);
  for (int i = 1; i <= 3; ++i) {
    for (int k = 1; k <= K; ++k) {
      double ref = 0.0;
      for (int b = 1; b <= B; ++b) ref += std::abs(s.loadings((b - 1) * K + k - 1, i - 1));
      EXPECT_NEAR(average_loading_magnitude(s, i, k, B, K), ref / B, 1e-12);
    }
  }
  EXPECT_THROW(average_loading_magnitude(s, 4, 1, B, K), MalformedInput);
  EXPECT_THROW(average_loading_magnitude(s, 1, 0, B, K), MalformedInput);
  EXPECT_THROW(average_loading_magnitude(s, 1, 1, B + 1, K), MalformedInput);
}

TEST(AverageLoading, ConstructedLoadings) {
  EssentialSubspace s;
  s.loadings = Eigen::MatrixXd::Constant(6, 1, 0.25);
  for (int k = 1; k <= 3; ++k) EXPECT_DOUBLE_EQ(average_loading_magnitude(s, 1, k, 2, 3), 0.25);
  s.loadings.setZero();
  s.loadings(0, 0) = 0.6;
  s.loadings(3, 0) = -0.8;
  EXPECT_DOUBLE_EQ(average_loading_magnitude(s, 1, 1, 2, 3), 0.7);
  EXPECT_EQ(average_loading_magnitude(s, 1, 2, 2, 3), 0.0);
  EXPECT_EQ(average_loading_magnitude(s, 1, 3, 2, 3), 0.0);
}

TEST(EncodeFunction, SequenceMajorLikePredictorRows) {
  ArchConfig arch;
  arch.layers = 1;
  arch.heads = 1;
  arch.d_embed = 8;
  arch.d_mlp = 8;
  arch.context_tokens = 6;
  arch.token_dim = 3;
  const Transformer<float> model(arch);
  const auto init = init_params(arch, 4);
  const std::vector<float> params(init.begin(), init.end());
  DataConfig data;
  data.D = 2;
  data.K = 3;
  TaskPool pool(data.pool_seed, data.D);
  const auto ds = sample_dataset(TaskDiversity::infinite(), 2, data, pool, Rng(6));
  const auto row = encode_function(model, params, ds);
  ASSERT_EQ(row.size(), 6u);
  EXPECT_EQ(encode_function(model, params, ds), row);
  const auto preds = model.forward(params, make_batch<float>(ds));
  for (int b = 0; b < 2; ++b) {
    for (int k = 0; k < 3; ++k) EXPECT_EQ(row[b * 3 + k], static_cast<double>(preds(b, k)));
  }
  // The predictor module lays out its rows the same way.
  const auto ridge = predictor_row(ds, PredictorKind::ridge, {}, 0.125);
  ASSERT_EQ(ridge.size(), row.size());
  for (int b = 0; b < 2; ++b) {
    EXPECT_EQ(ridge[b * 3], 0.0);  // k=1 has no context
  }
}

TEST(GaussianSmooth, ConstantAndIdentity) {
  const std::vector<double> flat(50, 3.5);
  for (double v : gaussian_smooth(flat, 4.0)) EXPECT_NEAR(v, 3.5, 1e-14);
  const std::vector<double> ramp{1, 4, 2, 8, 5};
  EXPECT_EQ(gaussian_smooth(ramp, 0.0), ramp);
  EXPECT_THROW(gaussian_smooth(ramp, -1.0), ConfigError);
}

TEST(GaussianSmooth, ImpulseMatchesNormalizedKernel) {
  std::vector<double> impulse(101, 0.0);
  impulse[50] = 1.0;
  const auto out = gaussian_smooth(impulse, 2.0);
  double total = 0.0;
  for (int o = -8; o <= 8; ++o) total += std::exp(-0.5 * (o / 2.0) * (o / 2.0));
  EXPECT_NEAR(out[50], 1.0 / total, 1e-12);
  EXPECT_NEAR(out[53], std::exp(-0.5 * 1.5 * 1.5) / total, 1e-12);
  EXPECT_EQ(out[59], 0.0);
}

TEST(GaussianSmooth, BoundaryRenormalizes) {
  std::vector<double> impulse(30, 0.0);
  impulse[0] = 1.0;
  const auto out = gaussian_smooth(impulse, 2.0);
  double total = 0.0;
  for (int o = 0; o <= 8; ++o) total += std::exp(-0.5 * (o / 2.0) * (o / 2.0));
  EXPECT_NEAR(out[0], 1.0 / total, 1e-12);
}

TEST(GaussianSmooth, PreservesMeanAwayFromEdges) {
  // Periodic series, interior window: smoothing is a convolution with a unit-mass kernel.
  std::vector<double> s(400);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(2.0 * std::numbers::pi * i / 40.0) + 1.0;
  const auto out = gaussian_smooth(s, 3.0);
  double a = 0.0;
  double b = 0.0;
  for (std::size_t i = 40; i < 360; ++i) {
    a += s[i];
    b += out[i];
  }
  EXPECT_NEAR(a / 320.0, b / 320.0, 1e-12);
}
