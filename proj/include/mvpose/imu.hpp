#pragma once

// IMU preintegration, inertial residuals between consecutive keyframes and
// linear visual-inertial alignment (scale, gravity, velocities, gyro bias).
//
// Conventions: `gravity` is the gravitational acceleration expressed in the
// reference frame (pointing down, |g| = 9.81). An accelerometer reports the
// specific force f = R_wb^T (a_w - g); a body at rest reads -R_wb^T g.
// Keyframe poses are camera poses T_{c<-ref}; the body pose follows from the
// fixed body-to-camera extrinsic T_{c<-b}.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/liegroups.hpp"

namespace mvpose {

inline constexpr double kGravityMagnitude = 9.81;

using Vector9 = Eigen::Matrix<double, 9, 1>;
using Vector15 = Eigen::Matrix<double, 15, 1>;

struct ImuSample {
  double t = 0.0;
  Vector3 gyro = Vector3::Zero();   // rad/s
  Vector3 accel = Vector3::Zero();  // m/s^2, specific force
};

struct ImuBias {
  Vector3 accel = Vector3::Zero();
  Vector3 gyro = Vector3::Zero();
};

struct ImuState {
  Vector3 velocity = Vector3::Zero();  // reference frame, m/s
  ImuBias bias;
};

struct InertialCalibration {
  RigidTransform body_to_camera;  // T_{c<-b}
  Vector3 gravity{0.0, 0.0, -kGravityMagnitude};
};

/// Noise model weighting the inertial residual blocks.
struct ImuNoise {
  double position_sigma = 1e-2;   // m
  double velocity_sigma = 1e-2;   // m/s
  double rotation_sigma = 2e-3;   // rad
  double accel_bias_walk = 1e-3;  // m/s^2/sqrt(s)
  double gyro_bias_walk = 1e-4;   // rad/s/sqrt(s)
};

/// Relative motion between two IMU states measured in the first body frame:
/// alpha (position), beta (velocity), gamma (rotation R_{b_i <- b_j}).
class Preintegration {
 public:
  double dt = 0.0;
  Vector3 alpha = Vector3::Zero();
  Vector3 beta = Vector3::Zero();
  Rotation gamma;
  ImuBias linearization_bias;
  Matrix3 d_alpha_d_ba = Matrix3::Zero();
  Matrix3 d_alpha_d_bg = Matrix3::Zero();
  Matrix3 d_beta_d_ba = Matrix3::Zero();
  Matrix3 d_beta_d_bg = Matrix3::Zero();
  Matrix3 d_gamma_d_bg = Matrix3::Zero();

  /// Midpoint step between two consecutive bias-free measurements.
  void integrate(double step, const ImuSample& a, const ImuSample& b) {
    const ImuBias& bias = linearization_bias;
    const Vector3 w = 0.5 * (a.gyro + b.gyro) - bias.gyro;
    const Vector3 f0 = a.accel - bias.accel;
    const Vector3 f1 = b.accel - bias.accel;
    const Matrix3 r0 = gamma.matrix();
    const Rotation dr = Rotation::exp(w * step);
    const Rotation gamma1 = gamma * dr;
    const Matrix3 r1 = gamma1.matrix();
    const Vector3 acc = 0.5 * (r0 * f0 + r1 * f1);

    const Matrix3 jg1 = dr.matrix().transpose() * d_gamma_d_bg - so3_right_jacobian(w * step) * step;
    const Matrix3 dacc_dba = -0.5 * (r0 + r1);
    const Matrix3 dacc_dbg = -0.5 * (r0 * hat(f0) * d_gamma_d_bg + r1 * hat(f1) * jg1);

    alpha += beta * step + 0.5 * acc * step * step;
    d_alpha_d_ba += d_beta_d_ba * step + 0.5 * dacc_dba * step * step;
    d_alpha_d_bg += d_beta_d_bg * step + 0.5 * dacc_dbg * step * step;
    beta += acc * step;
    d_beta_d_ba += dacc_dba * step;
    d_beta_d_bg += dacc_dbg * step;
    gamma = gamma1;
    d_gamma_d_bg = jg1;
    dt += step;
  }

  /// First-order bias-corrected measurements.
  Vector3 corrected_alpha(const ImuBias& b) const {
    return alpha + d_alpha_d_ba * (b.accel - linearization_bias.accel) +
           d_alpha_d_bg * (b.gyro - linearization_bias.gyro);
  }
  Vector3 corrected_beta(const ImuBias& b) const {
    return beta + d_beta_d_ba * (b.accel - linearization_bias.accel) +
           d_beta_d_bg * (b.gyro - linearization_bias.gyro);
  }
  Rotation corrected_gamma(const ImuBias& b) const {
    return gamma * Rotation::exp(d_gamma_d_bg * (b.gyro - linearization_bias.gyro));
  }

  /// Preintegration over [this interval, then `next`]. Both must share the
  /// linearization bias.
  Preintegration then(const Preintegration& next) const {
    Preintegration out = *this;
    const Matrix3 ra = gamma.matrix();
    out.dt = dt + next.dt;
    out.alpha = alpha + beta * next.dt + ra * next.alpha;
    out.beta = beta + ra * next.beta;
    out.gamma = gamma * next.gamma;
    out.d_alpha_d_ba = d_alpha_d_ba + d_beta_d_ba * next.dt + ra * next.d_alpha_d_ba;
    out.d_alpha_d_bg = d_alpha_d_bg + d_beta_d_bg * next.dt - ra * hat(next.alpha) * d_gamma_d_bg +
                       ra * next.d_alpha_d_bg;
    out.d_beta_d_ba = d_beta_d_ba + ra * next.d_beta_d_ba;
    out.d_beta_d_bg = d_beta_d_bg - ra * hat(next.beta) * d_gamma_d_bg + ra * next.d_beta_d_bg;
    out.d_gamma_d_bg = next.gamma.matrix().transpose() * d_gamma_d_bg + next.d_gamma_d_bg;
    return out;
  }
};

inline void check_monotonic(std::span<const ImuSample> samples) {
  for (size_t k = 1; k < samples.size(); ++k)
    if (!(samples[k].t > samples[k - 1].t))
      throw InputError("imu: timestamps must be strictly increasing");
}

/// Midpoint preintegration of a whole batch (at least two samples).
inline Preintegration preintegrate(std::span<const ImuSample> samples, const ImuBias& bias) {
  if (samples.size() < 2) throw InputError("imu: preintegration needs at least one sample interval");
  check_monotonic(samples);
  Preintegration p;
  p.linearization_bias = bias;
  for (size_t k = 0; k + 1 < samples.size(); ++k)
    p.integrate(samples[k + 1].t - samples[k].t, samples[k], samples[k + 1]);
  return p;
}

inline ImuSample interpolate_sample(const ImuSample& a, const ImuSample& b, double t) {
  const double f = (t - a.t) / (b.t - a.t);
  return {t, a.gyro + f * (b.gyro - a.gyro), a.accel + f * (b.accel - a.accel)};
}

/// Preintegrates the stream between t0 and t1, interpolating the end samples
/// when they fall between measurements.
inline Preintegration preintegrate_interval(std::span<const ImuSample> stream, double t0, double t1,
                                            const ImuBias& bias) {
  if (!(t1 > t0)) throw InputError("imu: empty preintegration interval");
  if (stream.size() < 2 || stream.front().t > t0 + 1e-9 || stream.back().t < t1 - 1e-9)
    throw InputError("imu: stream does not cover the keyframe interval");
  std::vector<ImuSample> batch;
  size_t k = 0;
  while (k + 1 < stream.size() && stream[k + 1].t <= t0) ++k;
  batch.push_back(std::abs(stream[k].t - t0) < 1e-12 ? stream[k]
                                                    : interpolate_sample(stream[k], stream[k + 1], t0));
  ++k;
  for (; k < stream.size() && stream[k].t < t1 - 1e-12; ++k)
    if (stream[k].t > batch.back().t + 1e-12) batch.push_back(stream[k]);
  if (k == stream.size())
    batch.push_back(stream.back());
  else if (std::abs(stream[k].t - t1) < 1e-12)
    batch.push_back(stream[k]);
  else
    batch.push_back(interpolate_sample(stream[k - 1], stream[k], t1));
  batch.back().t = t1;
  return preintegrate(batch, bias);
}

/// Inertial residual between keyframes i and j = i+1 with its Jacobian.
/// Residual layout: position(3) velocity(3) rotation(3) accel-bias(3) gyro-bias(3).
/// Jacobian columns: [pose_i(6) v_i(3) ba_i(3) bg_i(3) | pose_j(6) v_j ba_j bg_j],
/// pose columns under left perturbation T_{c<-ref} <- exp(d) T_{c<-ref}.
struct InertialResidual {
  Vector15 residual = Vector15::Zero();
  Eigen::Matrix<double, 15, 30> jacobian = Eigen::Matrix<double, 15, 30>::Zero();
};

namespace detail {
struct BodyPose {
  Matrix3 r;  // body -> reference
  Vector3 p;  // body origin in reference
};
inline BodyPose body_pose(const RigidTransform& camera_from_ref, const RigidTransform& body_to_camera) {
  const RigidTransform ref_from_body = camera_from_ref.inverse() * body_to_camera;
  return {ref_from_body.rotation().matrix(), ref_from_body.translation()};
}
}  // namespace detail

/// Unweighted residual terms, exactly:
///   R_i^T (p_j - p_i - v_i dt - g dt^2 / 2) - alpha
///   R_i^T (v_j - v_i - g dt) - beta
///   log(R_i^T R_j gamma^T)
///   ba_i - ba_j,  bg_i - bg_j
inline InertialResidual inertial_residual(const ImuState& si, const ImuState& sj,
                                          const RigidTransform& pose_i, const RigidTransform& pose_j,
                                          const Preintegration& pre, const InertialCalibration& calib) {
  using detail::body_pose;
  const auto bi = body_pose(pose_i, calib.body_to_camera);
  const auto bj = body_pose(pose_j, calib.body_to_camera);
  const double dt = pre.dt;
  const Vector3& g = calib.gravity;
  const Matrix3 rit = bi.r.transpose();

  const Vector3 dp = bj.p - bi.p - si.velocity * dt - 0.5 * g * dt * dt;
  const Vector3 dv = sj.velocity - si.velocity - g * dt;
  const Vector3 dbg = si.bias.gyro - pre.linearization_bias.gyro;
  const Rotation gamma = pre.corrected_gamma(si.bias);
  const Matrix3 gm = gamma.matrix();
  const Vector3 r_rot = Rotation(rit * bj.r * gm.transpose()).log();

  InertialResidual out;
  out.residual.segment<3>(0) = rit * dp - pre.corrected_alpha(si.bias);
  out.residual.segment<3>(3) = rit * dv - pre.corrected_beta(si.bias);
  out.residual.segment<3>(6) = r_rot;
  out.residual.segment<3>(9) = si.bias.accel - sj.bias.accel;
  out.residual.segment<3>(12) = si.bias.gyro - sj.bias.gyro;

  // Jacobians wrt right perturbations (phi, rho) of the body poses.
  Eigen::Matrix<double, 15, 6> d_body_i = Eigen::Matrix<double, 15, 6>::Zero();
  Eigen::Matrix<double, 15, 6> d_body_j = Eigen::Matrix<double, 15, 6>::Zero();
  d_body_i.block<3, 3>(0, 0) = hat(rit * dp);
  d_body_i.block<3, 3>(0, 3) = -Matrix3::Identity();
  d_body_j.block<3, 3>(0, 3) = rit * bj.r;
  d_body_i.block<3, 3>(3, 0) = hat(rit * dv);
  const Matrix3 jr_inv = so3_right_jacobian_inverse(r_rot);
  d_body_i.block<3, 3>(6, 0) = -so3_right_jacobian_inverse(-r_rot);
  d_body_j.block<3, 3>(6, 0) = jr_inv * gm;

  // Camera left perturbation d maps to body right perturbation -Ad(T_{b<-c}) d.
  const Matrix6 to_body = -calib.body_to_camera.inverse().adjoint();
  out.jacobian.block<15, 6>(0, 0) = d_body_i * to_body;
  out.jacobian.block<15, 6>(0, 15) = d_body_j * to_body;

  // Velocity columns.
  out.jacobian.block<3, 3>(0, 6) = -rit * dt;
  out.jacobian.block<3, 3>(3, 6) = -rit;
  out.jacobian.block<3, 3>(3, 21) = rit;
  // Bias columns of state i (bias correction) and the random-walk terms.
  out.jacobian.block<3, 3>(0, 9) = -pre.d_alpha_d_ba;
  out.jacobian.block<3, 3>(0, 12) = -pre.d_alpha_d_bg;
  out.jacobian.block<3, 3>(3, 9) = -pre.d_beta_d_ba;
  out.jacobian.block<3, 3>(3, 12) = -pre.d_beta_d_bg;
  out.jacobian.block<3, 3>(6, 12) =
      -jr_inv * gm * so3_right_jacobian(pre.d_gamma_d_bg * dbg) * pre.d_gamma_d_bg;
  out.jacobian.block<3, 3>(9, 9) = Matrix3::Identity();
  out.jacobian.block<3, 3>(9, 24) = -Matrix3::Identity();
  out.jacobian.block<3, 3>(12, 12) = Matrix3::Identity();
  out.jacobian.block<3, 3>(12, 27) = -Matrix3::Identity();
  return out;
}

/// Diagonal square-root information of the inertial residual for an interval dt.
inline Vector15 inertial_sqrt_information(const ImuNoise& n, double dt) {
  Vector15 w;
  w.segment<3>(0).setConstant(1.0 / n.position_sigma);
  w.segment<3>(3).setConstant(1.0 / n.velocity_sigma);
  w.segment<3>(6).setConstant(1.0 / n.rotation_sigma);
  w.segment<3>(9).setConstant(1.0 / (n.accel_bias_walk * std::sqrt(dt)));
  w.segment<3>(12).setConstant(1.0 / (n.gyro_bias_walk * std::sqrt(dt)));
  return w;
}

struct AlignmentResult {
  double scale = 1.0;
  Vector3 gravity = Vector3::Zero();
  std::vector<Vector3> velocities;  // reference frame, metric
  Vector3 gyro_bias = Vector3::Zero();
  double condition_number = 0.0;
};

struct AlignmentSettings {
  double max_condition_number = 1e8;
  int gravity_refinement_iterations = 4;
};

/// Gyro bias from rotation consistency between visual and preintegrated
/// rotations, linearised at the preintegration bias.
inline Vector3 estimate_gyro_bias(std::span<const RigidTransform> poses,
                                  std::span<const Preintegration> pre,
                                  const InertialCalibration& calib) {
  Matrix3 a = Matrix3::Zero();
  Vector3 b = Vector3::Zero();
  for (size_t i = 0; i < pre.size(); ++i) {
    const auto bi = detail::body_pose(poses[i], calib.body_to_camera);
    const auto bj = detail::body_pose(poses[i + 1], calib.body_to_camera);
    const Vector3 e = Rotation(pre[i].gamma.matrix().transpose() * bi.r.transpose() * bj.r).log();
    const Matrix3& j = pre[i].d_gamma_d_bg;
    a += j.transpose() * j;
    b += j.transpose() * e;
  }
  return pre.front().linearization_bias.gyro + a.ldlt().solve(b);
}

/// Recovers metric scale, gravity and keyframe velocities from up-to-scale
/// camera poses (T_{c<-ref}) and preintegrations between consecutive keyframes.
/// Unknowns of the linear system: velocities, gravity, scale; gravity is then
/// refined on the sphere |g| = 9.81 with a two-parameter tangent update.
inline AlignmentResult visual_inertial_align(std::span<const RigidTransform> poses,
                                             std::span<const Preintegration> pre_in,
                                             const InertialCalibration& calib,
                                             const AlignmentSettings& settings = {}) {
  const size_t n = poses.size();
  if (n < 4) throw InputError("alignment: need at least 4 keyframes");
  if (pre_in.size() != n - 1) throw InputError("alignment: need one preintegration per keyframe pair");

  AlignmentResult out;
  out.gyro_bias = estimate_gyro_bias(poses, pre_in, calib);
  ImuBias bias = pre_in.front().linearization_bias;
  bias.gyro = out.gyro_bias;

  std::vector<Matrix3> rot(n);
  std::vector<Vector3> centre(n), lever(n);
  const Vector3 t_cb = calib.body_to_camera.translation();
  for (size_t i = 0; i < n; ++i) {
    const RigidTransform ref_from_cam = poses[i].inverse();
    rot[i] = (ref_from_cam.rotation() * calib.body_to_camera.rotation()).matrix();
    centre[i] = ref_from_cam.translation();
    lever[i] = ref_from_cam.rotation() * t_cb;
  }

  // Scale column is divided by 100 for conditioning (its magnitude is O(1)
  // against velocity columns of O(dt)).
  constexpr double kScaleColumn = 100.0;
  const int nv = static_cast<int>(3 * n);
  auto solve_system = [&](bool refine, const Vector3& g0, const Eigen::Matrix<double, 3, 2>& basis,
                          Eigen::VectorXd& x) -> double {
    const int ng = refine ? 2 : 3;
    const int cols = nv + ng + 1;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(6 * (n - 1)), cols);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(a.rows());
    for (size_t i = 0; i + 1 < n; ++i) {
      const Preintegration& p = pre_in[i];
      const double dt = p.dt;
      const Matrix3 rit = rot[i].transpose();
      const int r0 = static_cast<int>(6 * i);
      const int vi = static_cast<int>(3 * i);
      Matrix3 g_pos = -0.5 * rit * dt * dt;
      Matrix3 g_vel = -rit * dt;
      Vector3 b_pos = p.corrected_alpha(bias) - rit * (lever[i + 1] - lever[i]);
      Vector3 b_vel = p.corrected_beta(bias);
      a.block<3, 3>(r0, vi) = -rit * dt;
      a.block<3, 1>(r0, cols - 1) = rit * (centre[i + 1] - centre[i]) / kScaleColumn;
      a.block<3, 3>(r0 + 3, vi) = -rit;
      a.block<3, 3>(r0 + 3, vi + 3) = rit;
      if (refine) {
        a.block<3, 2>(r0, nv) = g_pos * basis;
        a.block<3, 2>(r0 + 3, nv) = g_vel * basis;
        b_pos -= g_pos * g0;
        b_vel -= g_vel * g0;
      } else {
        a.block<3, 3>(r0, nv) = g_pos;
        a.block<3, 3>(r0 + 3, nv) = g_vel;
      }
      b.segment<3>(r0) = b_pos;
      b.segment<3>(r0 + 3) = b_vel;
    }
    Eigen::VectorXd col_norm = a.colwise().norm().transpose();
    for (Eigen::Index c = 0; c < col_norm.size(); ++c)
      if (col_norm[c] <= 0.0) col_norm[c] = 1.0;
    const Eigen::MatrixXd an = a * col_norm.cwiseInverse().asDiagonal();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(an, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cond = sv[sv.size() - 1] > 0.0 ? sv[0] / sv[sv.size() - 1]
                                                 : std::numeric_limits<double>::infinity();
    x = col_norm.cwiseInverse().asDiagonal() * svd.solve(b);
    return cond;
  };

  Eigen::VectorXd x;
  const Eigen::Matrix<double, 3, 2> unused = Eigen::Matrix<double, 3, 2>::Zero();
  out.condition_number = solve_system(false, Vector3::Zero(), unused, x);
  if (!(out.condition_number < settings.max_condition_number))
    throw UnobservableError("alignment: scale/gravity unobservable (insufficient excitation)",
                            out.condition_number);
  double scale = x[x.size() - 1] / kScaleColumn;
  Vector3 g = x.segment<3>(nv);
  if (!(scale > 0.0) || g.norm() < 1e-6)
    throw UnobservableError("alignment: non-positive scale estimate", out.condition_number);

  g = g.normalized() * kGravityMagnitude;
  for (int it = 0; it < settings.gravity_refinement_iterations; ++it) {
    const Vector3 dir = g.normalized();
    Vector3 tmp = std::abs(dir.x()) < 0.9 ? Vector3::UnitX() : Vector3::UnitZ();
    Eigen::Matrix<double, 3, 2> basis;
    basis.col(0) = (tmp - dir * dir.dot(tmp)).normalized();
    basis.col(1) = dir.cross(basis.col(0));
    out.condition_number = solve_system(true, g, basis, x);
    g = (g + basis * x.segment<2>(nv)).normalized() * kGravityMagnitude;
    scale = x[x.size() - 1] / kScaleColumn;
  }
  if (!(scale > 0.0))
    throw UnobservableError("alignment: non-positive scale estimate", out.condition_number);

  out.scale = scale;
  out.gravity = g;
  out.velocities.resize(n);
  for (size_t i = 0; i < n; ++i) out.velocities[i] = x.segment<3>(static_cast<Eigen::Index>(3 * i));
  return out;
}

}  // namespace mvpose
