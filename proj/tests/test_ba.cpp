#include <gtest/gtest.h>

#include <algorithm>

#include "ba_fixtures.hpp"
#include "mvpose/ba.hpp"

namespace mvpose {
namespace {

using testing::Rng;
using testing::SceneOptions;

Vector6 random_twist(Rng& rng, double rot, double trans) {
  Vector6 v;
  v << rng.vec3(rot), rng.vec3(trans);
  return v;
}

/// Two keyframes on a 4x4 grid with random geometry and random targets.
BaProblem random_tiny_problem(Rng& rng, bool stereo) {
  BaProblem p;
  p.intrinsics = {rng.uniform(5, 20), rng.uniform(5, 20), 1.5 + rng.uniform(-0.3, 0.3), 1.5, 4, 4};
  for (int i = 0; i < 2; ++i) {
    KeyframeState kf;
    kf.pose = RigidTransform::exp(random_twist(rng, 0.1, 0.2));
    kf.depth = make_depth_map(4, 4);
    for (int q = 0; q < 16; ++q) set_depth(kf.depth, q % 4, q / 4, rng.uniform(1.0, 4.0));
    p.keyframes.push_back(kf);
  }
  auto random_field = [&](int source, int target) {
    CorrespondenceField f;
    f.source = source;
    f.target = target;
    f.targets = PixelField(4, 4);
    for (size_t q = 0; q < 16; ++q) {
      f.targets.values[q] = Vector2(rng.uniform(-1, 5), rng.uniform(-1, 5));
      f.targets.valid[q] = 1;
      f.weights.push_back(Vector2(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)));
    }
    return f;
  };
  p.edges.push_back(random_field(0, 1));
  if (stereo) {
    StereoRig rig;
    rig.left_to_right = RigidTransform::exp(random_twist(rng, 0.05, 0.1));
    rig.fields.push_back(random_field(0, 0));
    rig.fields.push_back(random_field(1, 1));
    p.stereo = rig;
  }
  return p;
}

TEST(BundleAdjustment, ResidualsVanishAtTruth) {
  const BaProblem p = testing::make_ba_scene({});
  EXPECT_GT(reprojection_residuals(p).size(), 1000u);
  EXPECT_LT(total_cost(p), 1e-20);
}

TEST(BundleAdjustment, ReprojectionJacobiansMatchFiniteDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const BaProblem p = random_tiny_problem(rng, false);
    const auto blocks = reprojection_residuals(p);
    ASSERT_EQ(blocks.size(), 16u);
    Eigen::MatrixXd analytic = Eigen::MatrixXd::Zero(32, 28);
    for (size_t b = 0; b < blocks.size(); ++b) {
      analytic.block<2, 6>(2 * b, 0) = blocks[b].d_pose_source;
      analytic.block<2, 6>(2 * b, 6) = blocks[b].d_pose_target;
      analytic.block<2, 1>(2 * b, 12 + blocks[b].pixel) = blocks[b].d_depth;
    }
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      BaProblem q = p;
      q.keyframes[0].pose = RigidTransform::exp(d.segment<6>(0)) * q.keyframes[0].pose;
      q.keyframes[1].pose = RigidTransform::exp(d.segment<6>(6)) * q.keyframes[1].pose;
      for (int k = 0; k < 16; ++k) q.keyframes[0].depth.values[k] += d[12 + k];
      Eigen::VectorXd out(32);
      const auto bs = reprojection_residuals(q);
      for (size_t b = 0; b < bs.size(); ++b) out.segment<2>(2 * b) = bs[b].residual;
      return out;
    };
    EXPECT_LT(testing::relative_error(analytic, testing::numeric_jacobian(f, 28)), 1e-4) << trial;
  }
}

TEST(BundleAdjustment, StereoJacobiansMatchFiniteDifferences) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const BaProblem p = random_tiny_problem(rng, true);
    const auto blocks = stereo_residuals(p);
    ASSERT_EQ(blocks.size(), 32u);
    Eigen::MatrixXd analytic = Eigen::MatrixXd::Zero(64, 32);
    for (size_t b = 0; b < blocks.size(); ++b)
      analytic.block<2, 1>(2 * b, 16 * blocks[b].keyframe + blocks[b].pixel) = blocks[b].d_depth;
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      BaProblem q = p;
      for (int k = 0; k < 32; ++k) q.keyframes[k / 16].depth.values[k % 16] += d[k];
      Eigen::VectorXd out(64);
      const auto bs = stereo_residuals(q);
      for (size_t b = 0; b < bs.size(); ++b) out.segment<2>(2 * b) = bs[b].residual;
      return out;
    };
    EXPECT_LT(testing::relative_error(analytic, testing::numeric_jacobian(f, 32)), 1e-4) << trial;
  }
}

TEST(BundleAdjustment, DepthPriorResidual) {
  BaProblem p = testing::make_ba_scene({.keyframes = 2, .width = 4, .height = 4, .depth_prior = true});
  p.keyframes[1].depth.values[5] += 0.1;
  const auto blocks = depth_prior_residuals(p);
  ASSERT_EQ(blocks.size(), 32u);
  for (const auto& b : blocks) {
    EXPECT_DOUBLE_EQ(b.d_depth, -10.0);
    EXPECT_NEAR(b.residual, (b.keyframe == 1 && b.pixel == 5) ? -1.0 : 0.0, 1e-12);
  }
}

struct ToyCase {
  const char* name;
  BaProblem problem;
};

std::vector<ToyCase> schur_toys() {
  Rng rng(3);
  std::vector<ToyCase> out;
  const SceneOptions base{.keyframes = 2, .width = 4, .height = 4, .stereo = false, .focal = 8.0};
  auto perturbed = [&](SceneOptions opt) {
    BaProblem p = testing::make_ba_scene(opt);
    testing::perturb_scene(p, rng, 0.03, 0.05, 0.1);
    return p;
  };
  out.push_back({"monocular", perturbed(base)});
  SceneOptions st = base;
  st.stereo = true;
  st.baseline = 0.3;
  out.push_back({"stereo", perturbed(st)});
  st.depth_prior = true;
  out.push_back({"stereo+prior", perturbed(st)});

  BaProblem vi = perturbed(base);
  const testing::AnalyticTrajectory traj;
  InertialFactors in;
  // Mild weights keep the damped toy system well conditioned.
  in.noise = {0.1, 0.1, 0.02, 0.3, 0.03};
  in.calibration.body_to_camera = RigidTransform(Rotation::exp(Vector3(0.1, 0.2, 0.3)), Vector3(0.02, 0, 0));
  in.preintegrations.push_back(preintegrate(traj.samples(0.0, 0.1, 200.0), {}));
  in.states.push_back({traj.velocity(0.0), {}});
  in.states.push_back({traj.velocity(0.1), {Vector3(0.01, 0, 0), Vector3(0, 0.001, 0)}});
  vi.inertial = in;
  out.push_back({"inertial", vi});
  return out;
}

TEST(BundleAdjustment, SchurStepEqualsDenseStep) {
  for (const ToyCase& toy : schur_toys()) {
    const BaProblem& p = toy.problem;
    const testing::DenseSystem dense = testing::assemble_dense(p);
    ASSERT_LE(dense.depth_column.size(), 32u);
    for (double lambda : {1e-4, 1e-1}) {
      const Eigen::VectorXd ref = testing::dense_step(dense, lambda, p.scale_gauge_fixed());
      const Eigen::VectorXd got = testing::flatten_step(dense, compute_step(p, lambda));
      EXPECT_GT(ref.norm(), 1e-6) << toy.name;
      EXPECT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-8) << toy.name << " lambda " << lambda;
    }
  }
}

TEST(BundleAdjustment, MonocularStepKeepsMeanLogDepthOfFirstKeyframe) {
  const ToyCase toy = schur_toys().front();
  ASSERT_TRUE(toy.problem.scale_gauge_fixed());
  const BaStep step = compute_step(toy.problem, 1e-4);
  double sum = 0.0;
  for (double z : step.log_depth[0]) sum += z;
  EXPECT_LT(std::abs(sum), 1e-12);
  EXPECT_EQ(step.poses[0].norm(), 0.0);
}

void rescale(BaProblem& p, double s) {
  for (auto& kf : p.keyframes) {
    kf.pose = RigidTransform(kf.pose.rotation(), s * kf.pose.translation());
    for (auto& d : kf.depth.values) d *= s;
  }
}

TEST(BundleAdjustment, ReprojectionCostIsScaleInvariant) {
  Rng rng(4);
  BaProblem p = testing::make_ba_scene({.stereo = false});
  testing::perturb_scene(p, rng, 0.02, 0.03, 0.05);
  const double e0 = reprojection_cost(p);
  ASSERT_GT(e0, 1.0);
  for (double s : {0.5, 2.0, 3.7}) {
    BaProblem q = p;
    rescale(q, s);
    EXPECT_LT(std::abs(reprojection_cost(q) - e0) / e0, 1e-10) << s;
  }
}

TEST(BundleAdjustment, ScaleFactorsBreakTheGauge) {
  for (const bool stereo : {true, false}) {
    const BaProblem p = testing::make_ba_scene({.stereo = stereo, .depth_prior = !stereo});
    const double e0 = total_cost(p);
    for (double s : {0.5, 2.0}) {
      BaProblem q = p;
      rescale(q, s);
      EXPECT_GT(total_cost(q), e0 + 1e-3) << "stereo " << stereo << " s " << s;
    }
  }
}

double median_depth_error(const BaProblem& truth, const std::vector<KeyframeState>& est, double scale = 1.0) {
  std::vector<double> err;
  for (size_t i = 0; i < est.size(); ++i)
    for (size_t q = 0; q < est[i].depth.size(); ++q)
      if (truth.keyframes[i].depth.valid[q])
        err.push_back(std::abs(est[i].depth.values[q] / (scale * truth.keyframes[i].depth.values[q]) - 1.0));
  std::nth_element(err.begin(), err.begin() + err.size() / 2, err.end());
  return err[err.size() / 2];
}

TEST(BundleAdjustment, ConvergesFromPerturbedStereoInit) {
  const BaProblem truth = testing::make_ba_scene({});
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    BaProblem p = truth;
    testing::perturb_scene(p, rng, 2.0 * std::numbers::pi / 180.0, 0.05, 0.1);
    const BaResult r = solve(p);
    EXPECT_LE(r.iterations, 15);
    for (size_t k = 1; k < r.cost_history.size(); ++k) EXPECT_LE(r.cost_history[k], r.cost_history[k - 1]);
    for (size_t i = 0; i < truth.keyframes.size(); ++i) {
      const RigidTransform& a = r.keyframes[i].pose;
      const RigidTransform& b = truth.keyframes[i].pose;
      EXPECT_LT((a.rotation() * b.rotation().inverse()).angle(), 1e-3);
      EXPECT_LT((a.translation() - b.translation()).norm(), 1e-3);
    }
    EXPECT_LT(median_depth_error(truth, r.keyframes), 1e-3);
    EXPECT_FALSE(r.gauge_deficient);
  }
}

TEST(BundleAdjustment, MonocularRecoversTruthUpToScale) {
  const BaProblem truth = testing::make_ba_scene({.stereo = false});
  Rng rng(7);
  BaProblem p = truth;
  testing::perturb_scene(p, rng, 2.0 * std::numbers::pi / 180.0, 0.05, 0.1);
  const BaResult r = solve(p);
  EXPECT_TRUE(r.scale_gauge_fixed);
  EXPECT_FALSE(r.gauge_deficient);
  // Keyframe 0 is frozen, so the residual gauge is one global scale.
  std::vector<double> ratio;
  for (size_t q = 0; q < truth.keyframes[0].depth.size(); ++q)
    ratio.push_back(r.keyframes[0].depth.values[q] / truth.keyframes[0].depth.values[q]);
  std::nth_element(ratio.begin(), ratio.begin() + ratio.size() / 2, ratio.end());
  const double s = ratio[ratio.size() / 2];
  for (size_t i = 0; i < truth.keyframes.size(); ++i) {
    const RigidTransform& a = r.keyframes[i].pose;
    const RigidTransform& b = truth.keyframes[i].pose;
    EXPECT_LT((a.rotation() * b.rotation().inverse()).angle(), 1e-3);
    EXPECT_LT((a.translation() - s * b.translation()).norm(), 1e-3);
  }
  EXPECT_LT(median_depth_error(truth, r.keyframes, s), 1e-3);
}

TEST(BundleAdjustment, UnfixedMonocularGaugeIsReported) {
  BaProblem p = testing::make_ba_scene({.keyframes = 3, .width = 12, .height = 8, .stereo = false});
  p.settings.fix_scale_gauge = false;
  std::vector<std::string> warnings;
  set_log_sink([&](LogLevel, const std::string& m) { warnings.push_back(m); });
  const BaResult r = solve(p, 2, 1e-4);
  set_log_sink({});
  EXPECT_TRUE(r.gauge_deficient);
  EXPECT_FALSE(warnings.empty());
}

TEST(BundleAdjustment, ZeroIterationsReturnsInputUnchanged) {
  Rng rng(8);
  BaProblem p = testing::make_ba_scene({.keyframes = 3});
  testing::perturb_scene(p, rng, 0.02, 0.05, 0.1);
  const BaResult r = solve(p, 0, 1e-4);
  EXPECT_EQ(r.iterations, 0);
  for (size_t i = 0; i < p.keyframes.size(); ++i) {
    EXPECT_EQ(r.keyframes[i].pose.matrix(), p.keyframes[i].pose.matrix());
    EXPECT_EQ(r.keyframes[i].depth.values, p.keyframes[i].depth.values);
  }
}

TEST(BundleAdjustment, CovarianceIsInverseOfDenseHessianPoseBlock) {
  BaProblem p = testing::make_ba_scene({.keyframes = 3, .width = 8, .height = 6, .focal = 10.0});
  const BaResult r = solve(p, 1, 1e-4);
  BaProblem at = p;
  at.keyframes = r.keyframes;
  const testing::DenseSystem dense = testing::assemble_dense(at);
  const Eigen::MatrixXd h = dense.jacobian.transpose() * dense.jacobian;
  const Eigen::MatrixXd cov = h.inverse().topLeftCorner(12, 12);
  const Eigen::MatrixXd got = r.pose_covariance.bottomRightCorner(12, 12);
  EXPECT_LT((got - cov).cwiseAbs().maxCoeff() / cov.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(r.pose_covariance.topLeftCorner(6, 6).norm(), 0.0);
  // Relative to the frozen keyframe 0 the covariance is the absolute one.
  EXPECT_LT((r.relative_covariance(0, 2) - r.pose_covariance.block<6, 6>(12, 12)).norm(), 1e-12);
  const Matrix6 rel = r.relative_covariance(1, 2);
  EXPECT_LT((rel - rel.transpose()).norm(), 1e-12 * rel.norm());
  EXPECT_GT(Eigen::SelfAdjointEigenSolver<Matrix6>(rel).eigenvalues().minCoeff(), 0.0);
}

TEST(BundleAdjustment, ValidationRejectsMalformedProblems) {
  BaProblem p = testing::make_ba_scene({.keyframes = 2, .width = 4, .height = 4, .focal = 8.0});
  BaProblem q = p;
  q.keyframes.pop_back();
  EXPECT_THROW(solve(q), InputError);
  q = p;
  q.edges.clear();
  EXPECT_THROW(solve(q), InputError);
  q = p;
  q.edges[0].target = q.edges[0].source;
  EXPECT_THROW(solve(q), InputError);
  q = p;
  q.edges[0].target = 5;
  EXPECT_THROW(solve(q), InputError);
  q = p;
  q.edges[0].weights[0] = Vector2(-1, 0);
  EXPECT_THROW(solve(q), InputError);
}

TEST(BundleAdjustment, WarnsOnEdgeWithoutValidPixels) {
  BaProblem p = testing::make_ba_scene({.keyframes = 2, .width = 4, .height = 4, .focal = 8.0});
  std::fill(p.edges[0].targets.valid.begin(), p.edges[0].targets.valid.end(), 0);
  std::vector<std::string> warnings;
  set_log_sink([&](LogLevel, const std::string& m) { warnings.push_back(m); });
  reprojection_residuals(p);
  set_log_sink({});
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("no valid pixels"), std::string::npos);
}

}  // namespace
}  // namespace mvpose
