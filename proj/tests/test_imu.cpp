#include <gtest/gtest.h>

#include "mvpose/imu.hpp"
#include "test_support.hpp"

namespace mvpose {
namespace {

using testing::AnalyticTrajectory;
using testing::Rng;

double rotation_gap(const Rotation& a, const Matrix3& b) { return Rotation(a.matrix().transpose() * b).log().norm(); }

TEST(Preintegration, BodyAtRestMeasuresGravityOnly) {
  const Matrix3 r = Rotation::exp(Vector3(0.3, -0.2, 0.1)).matrix();
  const Vector3 g(0, 0, -kGravityMagnitude);
  std::vector<ImuSample> s;
  for (int k = 0; k <= 20; ++k) s.push_back({0.01 * k, Vector3::Zero(), -r.transpose() * g});
  const Preintegration p = preintegrate(s, {});
  EXPECT_NEAR(p.dt, 0.2, 1e-15);
  EXPECT_LT((p.alpha + 0.5 * r.transpose() * g * 0.04).norm(), 1e-12);
  EXPECT_LT((p.beta + r.transpose() * g * 0.2).norm(), 1e-12);
  EXPECT_LT(p.gamma.log().norm(), 1e-15);
}

TEST(Preintegration, MatchesAnalyticTruthAndFineReference) {
  const AnalyticTrajectory traj;
  for (double t0 : {0.0, 0.37, 1.2, 2.9}) {
    const double t1 = t0 + 0.2;
    const Preintegration coarse = preintegrate(traj.samples(t0, t1, 200.0), {});
    const Preintegration fine = preintegrate(traj.samples(t0, t1, 1000.0), {});
    Vector3 alpha, beta;
    Matrix3 gamma;
    traj.truth(t0, t1, alpha, beta, gamma);
    EXPECT_LT((coarse.alpha - fine.alpha).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT((coarse.beta - fine.beta).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT(Rotation(coarse.gamma.matrix().transpose() * fine.gamma.matrix()).log().norm(), 1e-5);
    // The fine reference itself converges to the analytic values.
    EXPECT_LT((fine.alpha - alpha).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((fine.beta - beta).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT(rotation_gap(fine.gamma, gamma), 1e-6);
  }
}

TEST(Preintegration, BiasJacobiansMatchReintegration) {
  const AnalyticTrajectory traj;
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const double t0 = rng.uniform(0.0, 5.0);
    ImuBias b0{rng.vec3(0.05), rng.vec3(0.01)};
    const auto samples = traj.samples(t0, t0 + 0.3, 200.0);
    const Preintegration p = preintegrate(samples, b0);
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      ImuBias b = b0;
      b.accel += d.head<3>();
      b.gyro += d.tail<3>();
      const Preintegration q = preintegrate(samples, b);
      Eigen::VectorXd out(9);
      out << q.alpha, q.beta, Rotation(p.gamma.matrix().transpose() * q.gamma.matrix()).log();
      return out;
    };
    Eigen::MatrixXd analytic = Eigen::MatrixXd::Zero(9, 6);
    analytic.block<3, 3>(0, 0) = p.d_alpha_d_ba;
    analytic.block<3, 3>(0, 3) = p.d_alpha_d_bg;
    analytic.block<3, 3>(3, 0) = p.d_beta_d_ba;
    analytic.block<3, 3>(3, 3) = p.d_beta_d_bg;
    analytic.block<3, 3>(6, 3) = p.d_gamma_d_bg;
    EXPECT_LT(testing::relative_error(analytic, testing::numeric_jacobian(f, 6)), 1e-4);
  }
}

TEST(Preintegration, FirstOrderCorrectionTracksSmallBiasChanges) {
  const AnalyticTrajectory traj;
  const auto samples = traj.samples(0.5, 0.8, 200.0);
  const Preintegration p = preintegrate(samples, {});
  const ImuBias nb{Vector3(1e-3, -2e-3, 1e-3), Vector3(2e-4, 1e-4, -1e-4)};
  const Preintegration q = preintegrate(samples, nb);
  EXPECT_LT((p.corrected_alpha(nb) - q.alpha).norm(), 1e-7);
  EXPECT_LT((p.corrected_beta(nb) - q.beta).norm(), 1e-7);
  EXPECT_LT(rotation_gap(p.corrected_gamma(nb), q.gamma.matrix()), 1e-7);
}

TEST(Preintegration, ThenComposesIntervals) {
  const AnalyticTrajectory traj;
  const ImuBias bias{Vector3(0.01, 0.02, -0.01), Vector3(0.001, -0.002, 0.003)};
  const auto all = traj.samples(1.0, 1.4, 200.0);
  const Preintegration whole = preintegrate(all, bias);
  const std::vector<ImuSample> first(all.begin(), all.begin() + 31), second(all.begin() + 30, all.end());
  const Preintegration joined = preintegrate(first, bias).then(preintegrate(second, bias));
  EXPECT_NEAR(joined.dt, whole.dt, 1e-12);
  EXPECT_LT((joined.alpha - whole.alpha).norm(), 1e-12);
  EXPECT_LT((joined.beta - whole.beta).norm(), 1e-12);
  EXPECT_LT(rotation_gap(joined.gamma, whole.gamma.matrix()), 1e-12);
  EXPECT_LT((joined.d_alpha_d_bg - whole.d_alpha_d_bg).norm(), 1e-10);
  EXPECT_LT((joined.d_beta_d_bg - whole.d_beta_d_bg).norm(), 1e-10);
  EXPECT_LT((joined.d_alpha_d_ba - whole.d_alpha_d_ba).norm(), 1e-10);
  EXPECT_LT((joined.d_gamma_d_bg - whole.d_gamma_d_bg).norm(), 1e-10);
}

TEST(Preintegration, IntervalInterpolatesEndSamples) {
  const AnalyticTrajectory traj;
  const auto stream = traj.samples(0.0, 2.0, 200.0);
  // Interval ends on sample boundaries: identical to direct batch integration.
  const Preintegration exact = preintegrate_interval(stream, 0.5, 0.75, {});
  const std::vector<ImuSample> batch(stream.begin() + 100, stream.begin() + 151);
  const Preintegration direct = preintegrate(batch, {});
  EXPECT_LT((exact.alpha - direct.alpha).norm(), 1e-12);
  // Off-grid ends stay close to the truth.
  const Preintegration off = preintegrate_interval(stream, 0.5012, 0.7533, {});
  Vector3 alpha, beta;
  Matrix3 gamma;
  traj.truth(0.5012, 0.7533, alpha, beta, gamma);
  EXPECT_NEAR(off.dt, 0.2521, 1e-12);
  EXPECT_LT((off.alpha - alpha).norm(), 1e-4);
  EXPECT_LT((off.beta - beta).norm(), 1e-4);
  // The very end of the stream is a valid interval end.
  EXPECT_NO_THROW(preintegrate_interval(stream, 1.9, 2.0, {}));
  EXPECT_THROW(preintegrate_interval(stream, 1.9, 2.5, {}), InputError);
  EXPECT_THROW(preintegrate_interval(stream, 1.0, 1.0, {}), InputError);
}

TEST(Preintegration, RejectsNonMonotonicTimestamps) {
  std::vector<ImuSample> s{{0.0, {}, {}}, {0.01, {}, {}}, {0.01, {}, {}}};
  EXPECT_THROW(preintegrate(s, {}), InputError);
  EXPECT_THROW(preintegrate(std::vector<ImuSample>{{0.0, {}, {}}}, {}), InputError);
}

struct ResidualFixture {
  ImuState si, sj;
  RigidTransform pi, pj;
  Preintegration pre;
  InertialCalibration calib;
};

ResidualFixture random_fixture(Rng& rng) {
  const AnalyticTrajectory traj;
  ResidualFixture f;
  f.calib.body_to_camera = RigidTransform(Rotation::exp(rng.rotation_vector(3.0)), rng.vec3(0.1));
  const double t0 = rng.uniform(0.0, 5.0), t1 = t0 + rng.uniform(0.05, 0.3);
  f.pre = preintegrate(traj.samples(t0, t1, 200.0), {rng.vec3(0.02), rng.vec3(0.005)});
  f.pi = traj.camera_pose(t0, f.calib.body_to_camera) * RigidTransform::exp((Vector6() << rng.vec3(0.05), rng.vec3(0.05)).finished());
  f.pj = traj.camera_pose(t1, f.calib.body_to_camera) * RigidTransform::exp((Vector6() << rng.vec3(0.05), rng.vec3(0.05)).finished());
  f.si = {traj.velocity(t0) + rng.vec3(0.1), {rng.vec3(0.02), rng.vec3(0.005)}};
  f.sj = {traj.velocity(t1) + rng.vec3(0.1), {rng.vec3(0.02), rng.vec3(0.005)}};
  return f;
}

TEST(InertialResidual, VanishesAtTruth) {
  const AnalyticTrajectory traj;
  Rng rng(2);
  InertialCalibration calib;
  calib.body_to_camera = RigidTransform(Rotation::exp(Vector3(1.2, -0.3, 0.4)), Vector3(0.05, -0.02, 0.01));
  const ImuBias bias{Vector3(0.02, -0.01, 0.03), Vector3(0.002, 0.001, -0.003)};
  const double t0 = 0.8, t1 = 1.0;
  const Preintegration pre = preintegrate(traj.samples(t0, t1, 1000.0, bias), bias);
  const ImuState si{traj.velocity(t0), bias}, sj{traj.velocity(t1), bias};
  const auto r = inertial_residual(si, sj, traj.camera_pose(t0, calib.body_to_camera),
                                   traj.camera_pose(t1, calib.body_to_camera), pre, calib);
  EXPECT_LT(r.residual.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(InertialResidual, JacobianMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const ResidualFixture fx = random_fixture(rng);
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      ImuState si = fx.si, sj = fx.sj;
      const RigidTransform pi = RigidTransform::exp(d.segment<6>(0)) * fx.pi;
      si.velocity += d.segment<3>(6);
      si.bias.accel += d.segment<3>(9);
      si.bias.gyro += d.segment<3>(12);
      const RigidTransform pj = RigidTransform::exp(d.segment<6>(15)) * fx.pj;
      sj.velocity += d.segment<3>(21);
      sj.bias.accel += d.segment<3>(24);
      sj.bias.gyro += d.segment<3>(27);
      return inertial_residual(si, sj, pi, pj, fx.pre, fx.calib).residual;
    };
    const auto r = inertial_residual(fx.si, fx.sj, fx.pi, fx.pj, fx.pre, fx.calib);
    EXPECT_LT(testing::relative_error(r.jacobian, testing::numeric_jacobian(f, 30)), 1e-4) << trial;
  }
}

TEST(InertialResidual, SqrtInformationScalesWithInterval) {
  const ImuNoise n;
  const Vector15 w1 = inertial_sqrt_information(n, 1.0), w4 = inertial_sqrt_information(n, 4.0);
  EXPECT_DOUBLE_EQ(w1[0], 1.0 / n.position_sigma);
  EXPECT_DOUBLE_EQ(w4[9], 0.5 * w1[9]);
  EXPECT_DOUBLE_EQ(w4[14], 0.5 * w1[14]);
}

struct AlignmentCase {
  std::vector<RigidTransform> poses;
  std::vector<Preintegration> pre;
  std::vector<Vector3> velocities;
  InertialCalibration calib;
};

AlignmentCase make_alignment_case(const AnalyticTrajectory& traj, double scale, int keyframes, double spacing,
                                  const ImuBias& bias = {}) {
  AlignmentCase c;
  c.calib.body_to_camera = RigidTransform(Rotation::exp(Vector3(1.2, -1.2, 1.2)), Vector3(0.04, 0.01, -0.02));
  for (int k = 0; k < keyframes; ++k) {
    const double t = 0.3 + spacing * k;
    const RigidTransform metric = traj.camera_pose(t, c.calib.body_to_camera);
    // Up-to-scale reconstruction: camera centres shrink by 1/scale.
    const RigidTransform ref_from_cam = metric.inverse();
    c.poses.push_back(RigidTransform(ref_from_cam.rotation(), ref_from_cam.translation() / scale).inverse());
    c.velocities.push_back(traj.velocity(t));
    if (k > 0) c.pre.push_back(preintegrate(traj.samples(t - spacing, t, 400.0, bias), {}));
  }
  return c;
}

TEST(Alignment, RecoversScaleGravityVelocitiesAndGyroBias) {
  const AnalyticTrajectory traj;
  const ImuBias bias{Vector3::Zero(), Vector3(0.003, -0.002, 0.004)};
  const AlignmentCase c = make_alignment_case(traj, 2.5, 10, 0.25, bias);
  const AlignmentResult a = visual_inertial_align(c.poses, c.pre, c.calib);
  EXPECT_LT(std::abs(a.scale - 2.5) / 2.5, 0.01);
  EXPECT_LT(std::abs(a.scale - 2.5) / 2.5, 1e-3);
  EXPECT_LT((a.gravity - traj.gravity).norm(), 1e-2);
  EXPECT_NEAR(a.gravity.norm(), kGravityMagnitude, 1e-12);
  EXPECT_LT((a.gyro_bias - bias.gyro).norm(), 1e-4);
  for (size_t i = 0; i < c.velocities.size(); ++i) EXPECT_LT((a.velocities[i] - c.velocities[i]).norm(), 2e-2);
  EXPECT_LT(a.condition_number, 1e8);
}

TEST(Alignment, ConstantVelocityIsUnobservable) {
  AnalyticTrajectory traj;
  traj.amp.setZero();
  traj.att_amp.setZero();
  traj.drift = Vector3(0.5, 0.2, 0.0);
  const AlignmentCase c = make_alignment_case(traj, 2.5, 8, 0.25);
  try {
    visual_inertial_align(c.poses, c.pre, c.calib);
    FAIL() << "expected UnobservableError";
  } catch (const UnobservableError& e) {
    EXPECT_GT(e.condition_number(), 1e8);
  }
}

TEST(Alignment, RejectsTooFewKeyframes) {
  const AnalyticTrajectory traj;
  const AlignmentCase c = make_alignment_case(traj, 2.0, 3, 0.25);
  EXPECT_THROW(visual_inertial_align(c.poses, c.pre, c.calib), InputError);
}

}  // namespace
}  // namespace mvpose
