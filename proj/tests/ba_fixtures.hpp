#pragma once

// Small synthetic bundle-adjustment problems and a dense reference solver.

#include <map>
#include <utility>

#include "mvpose/ba.hpp"
#include "test_support.hpp"

namespace mvpose::testing {

inline DepthMap smooth_depth(const Intrinsics& k, int frame) {
  DepthMap d = make_depth_map(k.width, k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u)
      set_depth(d, u, v, 3.0 + 0.5 * std::sin(0.3 * u + frame) * std::cos(0.2 * v) + 0.02 * u - 0.1 * frame);
  return d;
}

inline CorrespondenceField exact_field(const RigidTransform& t_ji, const DepthMap& depth, const Intrinsics& k,
                                       int source, int target) {
  CorrespondenceField f;
  f.source = source;
  f.target = target;
  f.targets = warp(t_ji, depth, k);
  f.weights.assign(f.targets.size(), Vector2(1.0, 1.0));
  f.sanitize();
  return f;
}

struct SceneOptions {
  int keyframes = 6;
  int width = 32;
  int height = 24;
  bool stereo = true;
  bool depth_prior = false;
  double baseline = 0.1;
  double focal = 40.0;
};

/// Noise-free scene: chain + skip-2 edges in both directions.
inline BaProblem make_ba_scene(const SceneOptions& opt) {
  BaProblem p;
  p.intrinsics = {opt.focal, opt.focal, 0.5 * opt.width - 0.5, 0.5 * opt.height - 0.5, opt.width, opt.height};
  for (int i = 0; i < opt.keyframes; ++i) {
    KeyframeState kf;
    kf.timestamp = 0.1 * i;
    const Rotation r = Rotation::exp(Vector3(0.02 * i, -0.03 * i, 0.01 * std::sin(i)));
    const Vector3 centre(0.12 * i, 0.03 * std::sin(1.7 * i), 0.04 * i);
    kf.pose = RigidTransform(r, -(r * centre));
    kf.depth = smooth_depth(p.intrinsics, i);
    p.keyframes.push_back(kf);
  }
  const int n = opt.keyframes;
  for (int i = 0; i < n; ++i) {
    for (int j : {i - 2, i - 1, i + 1, i + 2}) {
      if (j < 0 || j >= n) continue;
      p.edges.push_back(exact_field(p.keyframes[j].pose * p.keyframes[i].pose.inverse(), p.keyframes[i].depth,
                                    p.intrinsics, i, j));
    }
  }
  if (opt.stereo) {
    StereoRig rig;
    rig.left_to_right = RigidTransform(Rotation::identity(), Vector3(-opt.baseline, 0, 0));
    for (int i = 0; i < n; ++i)
      rig.fields.push_back(exact_field(rig.left_to_right, p.keyframes[i].depth, p.intrinsics, i, i));
    p.stereo = rig;
  }
  if (opt.depth_prior) {
    for (int i = 0; i < n; ++i) {
      DepthPrior prior;
      prior.keyframe = i;
      prior.measured = p.keyframes[i].depth;
      prior.weights.assign(prior.measured.size(), 100.0);
      p.depth_priors.push_back(prior);
    }
  }
  return p;
}

/// Perturbs every keyframe except the first: rotation by `angle` about a random
/// axis, translation by `offset` in a random direction, depths by a factor
/// (1 +- depth_fraction) per pixel.
inline void perturb_scene(BaProblem& p, Rng& rng, double angle, double offset, double depth_fraction) {
  for (size_t i = 0; i < p.keyframes.size(); ++i) {
    auto& kf = p.keyframes[i];
    for (size_t q = 0; q < kf.depth.size(); ++q)
      if (kf.depth.valid[q]) kf.depth.values[q] *= 1.0 + (rng.uniform() < 0.5 ? -1.0 : 1.0) * depth_fraction;
    if (i == 0) continue;
    kf.pose = RigidTransform(Rotation::exp(rng.unit() * angle) * kf.pose.rotation(),
                             kf.pose.translation() + rng.unit() * offset);
  }
}

/// Dense Jacobian of every residual of a problem, assembled from the residual
/// blocks, over [poses 1..n-1 | IMU states | log-depth of every used pixel].
struct DenseSystem {
  Eigen::MatrixXd jacobian;
  Eigen::VectorXd residual;
  std::map<std::pair<int, int>, int> depth_column;  // (frame, pixel) -> column
  int num_pose = 0;
  int num_imu = 0;
};

inline DenseSystem assemble_dense(const BaProblem& p) {
  const int n = static_cast<int>(p.keyframes.size());
  DenseSystem d;
  d.num_pose = 6 * (n - 1);
  d.num_imu = p.inertial ? 9 * n : 0;
  const auto reproj = reprojection_residuals(p);
  const auto stereo = stereo_residuals(p);
  const auto prior = depth_prior_residuals(p);
  const auto inertial = inertial_residuals(p);
  int cols = d.num_pose + d.num_imu;
  auto depth_col = [&](int frame, int pixel) {
    auto [it, inserted] = d.depth_column.emplace(std::make_pair(frame, pixel), cols);
    if (inserted) ++cols;
    return it->second;
  };
  for (const auto& b : reproj) depth_col(p.edges[b.edge].source, b.pixel);
  for (const auto& b : stereo) depth_col(b.keyframe, b.pixel);
  for (const auto& b : prior) depth_col(b.keyframe, b.pixel);
  const int rows = static_cast<int>(2 * reproj.size() + 2 * stereo.size() + prior.size() + 15 * inertial.size());
  d.jacobian = Eigen::MatrixXd::Zero(rows, cols);
  d.residual = Eigen::VectorXd::Zero(rows);
  auto pose_col = [](int kf) { return kf == 0 ? -1 : 6 * (kf - 1); };
  int r = 0;
  for (const auto& b : reproj) {
    const auto& e = p.edges[b.edge];
    d.residual.segment<2>(r) = b.residual;
    if (pose_col(e.source) >= 0) d.jacobian.block<2, 6>(r, pose_col(e.source)) += b.d_pose_source;
    if (pose_col(e.target) >= 0) d.jacobian.block<2, 6>(r, pose_col(e.target)) += b.d_pose_target;
    d.jacobian.block<2, 1>(r, depth_col(e.source, b.pixel)) =
        b.d_depth * p.keyframes[e.source].depth.values[b.pixel];
    r += 2;
  }
  for (const auto& b : stereo) {
    d.residual.segment<2>(r) = b.residual;
    d.jacobian.block<2, 1>(r, depth_col(b.keyframe, b.pixel)) =
        b.d_depth * p.keyframes[b.keyframe].depth.values[b.pixel];
    r += 2;
  }
  for (const auto& b : prior) {
    d.residual[r] = b.residual;
    d.jacobian(r, depth_col(b.keyframe, b.pixel)) = b.d_depth * p.keyframes[b.keyframe].depth.values[b.pixel];
    r += 1;
  }
  for (const auto& b : inertial) {
    d.residual.segment<15>(r) = b.weighted.residual;
    for (int s = 0; s < 2; ++s) {
      const int kf = b.keyframe + s;
      if (pose_col(kf) >= 0) d.jacobian.block<15, 6>(r, pose_col(kf)) = b.weighted.jacobian.block<15, 6>(0, 15 * s);
      d.jacobian.block<15, 9>(r, d.num_pose + 9 * kf) = b.weighted.jacobian.block<15, 9>(0, 15 * s + 6);
    }
    r += 15;
  }
  return d;
}

/// Damped Gauss-Newton step of the dense system; with `fix_mean_log_depth`
/// the sum of frame-0 log-depth increments is constrained to zero (KKT).
inline Eigen::VectorXd dense_step(const DenseSystem& d, double lambda, bool fix_mean_log_depth) {
  const Eigen::Index m = d.jacobian.cols();
  Eigen::MatrixXd h = d.jacobian.transpose() * d.jacobian;
  h.diagonal().array() += lambda;
  const Eigen::VectorXd g = -d.jacobian.transpose() * d.residual;
  if (!fix_mean_log_depth) return h.fullPivLu().solve(g);
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
  kkt.topLeftCorner(m, m) = h;
  for (const auto& [key, col] : d.depth_column) {
    if (key.first != 0) continue;
    kkt(m, col) = 1.0;
    kkt(col, m) = 1.0;
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 1);
  rhs.head(m) = g;
  return kkt.fullPivLu().solve(rhs).head(m);
}

/// Flattens a solver step into the dense column layout.
inline Eigen::VectorXd flatten_step(const DenseSystem& d, const BaStep& s) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(d.jacobian.cols());
  for (size_t i = 1; i < s.poses.size(); ++i) x.segment<6>(6 * (i - 1)) = s.poses[i];
  for (size_t i = 0; i < s.imu.size(); ++i) x.segment<9>(d.num_pose + 9 * i) = s.imu[i];
  for (const auto& [key, col] : d.depth_column) x[col] = s.log_depth[key.first][key.second];
  return x;
}

}  // namespace mvpose::testing
