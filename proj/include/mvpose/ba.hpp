#pragma once

// Scale-aware dense bundle adjustment.
//
// Jointly refines keyframe poses T_{c_i<-ref} and per-pixel depths against
//   * flow correspondences  P_ij - proj(T_ji * backproj(D_i)),  T_ji = T_j T_i^-1
//   * stereo correspondences P_ii' - proj(T_{c'<-c} * backproj(D_i))
//   * depth priors  sqrt(w) (D_hat - D)
//   * inertial factors between consecutive keyframes (see imu.hpp).
// Damped Gauss-Newton; depth variables (log-depth internally) are eliminated
// with the Schur complement, leaving a dense system in poses (+ IMU states).
//
// Gauge: keyframe 0 is frozen. Without any scale factor (pure monocular) the
// mean log-depth of keyframe 0 is also held fixed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mvpose/camera.hpp"
#include "mvpose/error.hpp"
#include "mvpose/imu.hpp"
#include "mvpose/liegroups.hpp"
#include "mvpose/log.hpp"

namespace mvpose {

using Matrix26 = Eigen::Matrix<double, 2, 6>;

/// Predicted target pixels of frame `source` in frame `target` with diagonal
/// per-pixel inverse variances (1/px^2). Invalid pixels carry zero weight.
struct CorrespondenceField {
  int source = 0;
  int target = 0;
  PixelField targets;
  std::vector<Vector2> weights;

  void sanitize() {
    if (weights.size() != targets.size()) weights.resize(targets.size(), Vector2::Zero());
    for (size_t p = 0; p < targets.size(); ++p)
      if (!targets.valid[p]) weights[p].setZero();
  }
};

struct KeyframeState {
  double timestamp = 0.0;
  RigidTransform pose;  // T_{c_i <- ref}
  DepthMap depth;
};

struct StereoRig {
  RigidTransform left_to_right;               // T_{c' <- c}, held constant
  std::vector<CorrespondenceField> fields;    // one per keyframe (source = keyframe index)
};

struct DepthPrior {
  int keyframe = 0;
  DepthMap measured;
  std::vector<double> weights;  // 1/m^2 per pixel
};

struct InertialFactors {
  InertialCalibration calibration;
  ImuNoise noise;
  std::vector<Preintegration> preintegrations;  // keyframe i -> i+1
  std::vector<ImuState> states;                 // one per keyframe
};

struct BaSettings {
  int max_iterations = 15;
  double initial_damping = 1e-4;
  /// Hold the mean log-depth of keyframe 0; defaults to "no scale factor present".
  std::optional<bool> fix_scale_gauge;
  double relative_tolerance = 1e-14;
};

struct BaProblem {
  Intrinsics intrinsics;
  std::vector<KeyframeState> keyframes;
  std::vector<CorrespondenceField> edges;
  std::optional<StereoRig> stereo;
  std::vector<DepthPrior> depth_priors;
  std::optional<InertialFactors> inertial;
  BaSettings settings;

  bool has_scale_factor() const { return stereo.has_value() || !depth_priors.empty() || inertial.has_value(); }
  bool scale_gauge_fixed() const { return settings.fix_scale_gauge.value_or(!has_scale_factor()); }

  void validate() const {
    intrinsics.validate();
    const int n = static_cast<int>(keyframes.size());
    if (n < 2) throw InputError("ba: need at least two keyframes");
    if (edges.empty()) throw InputError("ba: need at least one edge");
    for (const auto& kf : keyframes)
      if (kf.depth.width != intrinsics.width || kf.depth.height != intrinsics.height)
        throw InputError("ba: depth map size does not match intrinsics");
    auto check_field = [&](const CorrespondenceField& f) {
      if (f.targets.width != intrinsics.width || f.targets.height != intrinsics.height ||
          f.weights.size() != f.targets.size())
        throw InputError("ba: correspondence field size mismatch");
      for (const auto& w : f.weights)
        if (!(w.x() >= 0.0 && w.y() >= 0.0)) throw InputError("ba: negative correspondence weight");
    };
    for (const auto& e : edges) {
      if (e.source == e.target) throw InputError("ba: self edge");
      if (e.source < 0 || e.source >= n || e.target < 0 || e.target >= n)
        throw InputError("ba: edge references a missing keyframe");
      check_field(e);
    }
    if (stereo) {
      for (const auto& f : stereo->fields) {
        if (f.source < 0 || f.source >= n) throw InputError("ba: stereo field references a missing keyframe");
        check_field(f);
      }
    }
    for (const auto& p : depth_priors) {
      if (p.keyframe < 0 || p.keyframe >= n) throw InputError("ba: depth prior references a missing keyframe");
      if (p.measured.width != intrinsics.width || p.measured.height != intrinsics.height ||
          p.weights.size() != p.measured.size())
        throw InputError("ba: depth prior size mismatch");
    }
    if (inertial) {
      if (static_cast<int>(inertial->states.size()) != n ||
          static_cast<int>(inertial->preintegrations.size()) != n - 1)
        throw InputError("ba: inertial factors need one state per keyframe and one preintegration per pair");
    }
  }
};

// ---------------------------------------------------------------------------
// Residual blocks. Depth Jacobians are with respect to metric depth D(p);
// pose Jacobians use the left perturbation T <- exp(d) T.

struct ReprojectionBlock {
  int edge = 0;
  int pixel = 0;
  Vector2 residual = Vector2::Zero();
  Matrix26 d_pose_source = Matrix26::Zero();
  Matrix26 d_pose_target = Matrix26::Zero();
  Vector2 d_depth = Vector2::Zero();
};

struct StereoBlock {
  int keyframe = 0;
  int pixel = 0;
  Vector2 residual = Vector2::Zero();
  Vector2 d_depth = Vector2::Zero();
};

struct DepthPriorBlock {
  int keyframe = 0;
  int pixel = 0;
  double residual = 0.0;
  double d_depth = 0.0;
};

struct InertialBlock {
  int keyframe = 0;  // factor between keyframe and keyframe + 1
  InertialResidual weighted;
};

namespace detail {

struct ProjectionTerm {
  Vector2 residual;
  Eigen::Matrix<double, 2, 3> d_point;  // d r / d y
  Vector3 point;                        // y
};

/// r = sqrt(w) .* (target - proj(y)); false when the point is behind the camera
/// or the pixel carries no weight.
inline bool projection_term(const Intrinsics& k, const Vector3& y, const Vector2& target,
                            const Vector2& weight, ProjectionTerm& out) {
  if (!(y.z() > kMinProjectionDepth)) return false;
  if (weight.x() <= 0.0 && weight.y() <= 0.0) return false;
  const Vector2 sw(std::sqrt(weight.x()), std::sqrt(weight.y()));
  out.point = y;
  out.residual = sw.cwiseProduct(target - k.project(y));
  out.d_point = -(sw.asDiagonal() * k.projection_jacobian(y));
  return true;
}

}  // namespace detail

inline std::vector<ReprojectionBlock> reprojection_residuals(const BaProblem& problem) {
  std::vector<ReprojectionBlock> out;
  const Intrinsics& k = problem.intrinsics;
  for (size_t e = 0; e < problem.edges.size(); ++e) {
    const auto& edge = problem.edges[e];
    const auto& src = problem.keyframes[edge.source];
    const auto& dst = problem.keyframes[edge.target];
    const RigidTransform t_ji = dst.pose * src.pose.inverse();
    const Matrix3 r_ji = t_ji.rotation().matrix();
    size_t used = 0;
    for (int v = 0; v < k.height; ++v) {
      for (int u = 0; u < k.width; ++u) {
        const size_t p = src.depth.index(u, v);
        if (!src.depth.valid[p] || !edge.targets.valid[p]) continue;
        const Vector3 ray = k.ray(u, v);
        const Vector3 x = src.depth.values[p] * ray;
        detail::ProjectionTerm term;
        if (!detail::projection_term(k, t_ji * x, edge.targets.values[p], edge.weights[p], term)) continue;
        ReprojectionBlock b;
        b.edge = static_cast<int>(e);
        b.pixel = static_cast<int>(p);
        b.residual = term.residual;
        Eigen::Matrix<double, 3, 6> dy_dst;
        dy_dst << -hat(term.point), Matrix3::Identity();
        Eigen::Matrix<double, 3, 6> dy_src;
        dy_src << r_ji * hat(x), -r_ji;
        b.d_pose_target = term.d_point * dy_dst;
        b.d_pose_source = term.d_point * dy_src;
        b.d_depth = term.d_point * (r_ji * ray);
        out.push_back(b);
        ++used;
      }
    }
    if (used == 0)
      log_warning("ba: edge " + std::to_string(edge.source) + "->" + std::to_string(edge.target) +
                  " has no valid pixels");
  }
  return out;
}

inline std::vector<StereoBlock> stereo_residuals(const BaProblem& problem) {
  std::vector<StereoBlock> out;
  if (!problem.stereo) return out;
  const Intrinsics& k = problem.intrinsics;
  const RigidTransform& t_rl = problem.stereo->left_to_right;
  const Matrix3 r_rl = t_rl.rotation().matrix();
  for (const auto& f : problem.stereo->fields) {
    const auto& kf = problem.keyframes[f.source];
    for (int v = 0; v < k.height; ++v) {
      for (int u = 0; u < k.width; ++u) {
        const size_t p = kf.depth.index(u, v);
        if (!kf.depth.valid[p] || !f.targets.valid[p]) continue;
        const Vector3 ray = k.ray(u, v);
        detail::ProjectionTerm term;
        if (!detail::projection_term(k, t_rl * (kf.depth.values[p] * ray), f.targets.values[p], f.weights[p],
                                     term))
          continue;
        out.push_back({f.source, static_cast<int>(p), term.residual, term.d_point * (r_rl * ray)});
      }
    }
  }
  return out;
}

inline std::vector<DepthPriorBlock> depth_prior_residuals(const BaProblem& problem) {
  std::vector<DepthPriorBlock> out;
  for (const auto& prior : problem.depth_priors) {
    const auto& kf = problem.keyframes[prior.keyframe];
    for (size_t p = 0; p < prior.measured.size(); ++p) {
      if (!prior.measured.valid[p] || !kf.depth.valid[p] || prior.weights[p] <= 0.0) continue;
      const double sw = std::sqrt(prior.weights[p]);
      out.push_back({prior.keyframe, static_cast<int>(p), sw * (prior.measured.values[p] - kf.depth.values[p]), -sw});
    }
  }
  return out;
}

/// Inertial residuals pre-multiplied by their square-root information.
inline std::vector<InertialBlock> inertial_residuals(const BaProblem& problem) {
  std::vector<InertialBlock> out;
  if (!problem.inertial) return out;
  const auto& in = *problem.inertial;
  for (size_t i = 0; i + 1 < problem.keyframes.size(); ++i) {
    const Preintegration& pre = in.preintegrations[i];
    InertialResidual r = inertial_residual(in.states[i], in.states[i + 1], problem.keyframes[i].pose,
                                           problem.keyframes[i + 1].pose, pre, in.calibration);
    const Vector15 w = inertial_sqrt_information(in.noise, pre.dt);
    r.residual = w.cwiseProduct(r.residual);
    r.jacobian = w.asDiagonal() * r.jacobian;
    out.push_back({static_cast<int>(i), r});
  }
  return out;
}

inline double reprojection_cost(const BaProblem& problem) {
  double c = 0.0;
  for (const auto& b : reprojection_residuals(problem)) c += b.residual.squaredNorm();
  return c;
}

/// Total objective: sum of squared (weighted) residuals of every factor.
inline double total_cost(const BaProblem& problem) {
  double c = reprojection_cost(problem);
  for (const auto& b : stereo_residuals(problem)) c += b.residual.squaredNorm();
  for (const auto& b : depth_prior_residuals(problem)) c += b.residual * b.residual;
  for (const auto& b : inertial_residuals(problem)) c += b.weighted.residual.squaredNorm();
  return c;
}

// ---------------------------------------------------------------------------
// Solver.

/// Increment for every variable of a problem. Pose rows of keyframe 0 are zero.
struct BaStep {
  std::vector<Vector6> poses;
  std::vector<Vector9> imu;                  // (v, ba, bg) per keyframe
  std::vector<std::vector<double>> log_depth;  // per keyframe, per pixel (0 where unused)
};

struct BaResult {
  std::vector<KeyframeState> keyframes;
  std::vector<ImuState> imu_states;
  /// Covariance of all keyframe poses (6N x 6N, left-perturbation tangent);
  /// rows/cols of the frozen keyframe 0 are zero.
  Eigen::MatrixXd pose_covariance;
  std::vector<double> cost_history;
  int iterations = 0;
  bool scale_gauge_fixed = false;
  bool gauge_deficient = false;

  /// Covariance of the relative pose T_j T_i^-1 (left-perturbation tangent).
  Matrix6 relative_covariance(int i, int j) const {
    const RigidTransform rel = keyframes[j].pose * keyframes[i].pose.inverse();
    Eigen::Matrix<double, 6, 12> a;
    a << -rel.adjoint(), Matrix6::Identity();
    Eigen::Matrix<double, 12, 12> joint;
    joint.block<6, 6>(0, 0) = pose_covariance.block<6, 6>(6 * i, 6 * i);
    joint.block<6, 6>(0, 6) = pose_covariance.block<6, 6>(6 * i, 6 * j);
    joint.block<6, 6>(6, 0) = pose_covariance.block<6, 6>(6 * j, 6 * i);
    joint.block<6, 6>(6, 6) = pose_covariance.block<6, 6>(6 * j, 6 * j);
    return a * joint * a.transpose();
  }
};

namespace detail {

/// Normal equations of one linearisation, depth block kept per pixel.
class BaLinearSystem {
 public:
  explicit BaLinearSystem(const BaProblem& problem) : problem_(problem) {
    const int n = static_cast<int>(problem.keyframes.size());
    num_pose_ = 6 * (n - 1);
    num_reduced_ = num_pose_ + (problem.inertial ? 9 * n : 0);
    fix_gauge_ = problem.scale_gauge_fixed();
    h_ = Eigen::MatrixXd::Zero(num_reduced_, num_reduced_);
    g_ = Eigen::VectorXd::Zero(num_reduced_);

    frames_.resize(n);
    for (int i = 0; i < n; ++i) frames_[i].slots.push_back(i);
    for (const auto& e : problem.edges) {
      auto& slots = frames_[e.source].slots;
      if (std::find(slots.begin(), slots.end(), e.target) == slots.end()) slots.push_back(e.target);
    }
    for (int i = 0; i < n; ++i) {
      auto& f = frames_[i];
      const size_t np = problem.keyframes[i].depth.size();
      f.hdd.assign(np, 0.0);
      f.gd.assign(np, 0.0);
      f.stride = 6 * static_cast<int>(f.slots.size());
      f.hvec.assign(np * f.stride, 0.0);
    }
    accumulate();
  }

  int num_reduced() const { return num_reduced_; }

  /// Solves the damped system (H + lambda I) d = -J^T r.
  BaStep solve(double lambda) const {
    Eigen::MatrixXd s = h_;
    Eigen::VectorXd b = g_;
    s.diagonal().array() += lambda;
    Eigen::VectorXd gauge_u = Eigen::VectorXd::Zero(num_reduced_);
    double gauge_c = 0.0, gauge_q = 0.0;
    eliminate_depth(lambda, s, b, gauge_u, gauge_c, gauge_q);
    if (fix_gauge_ && gauge_c > 0.0) {
      s += gauge_u * gauge_u.transpose() / gauge_c;
      b += gauge_u * (gauge_q / gauge_c);
    }
    Eigen::VectorXd dx = num_reduced_ > 0 ? Eigen::VectorXd(s.ldlt().solve(b)) : Eigen::VectorXd();
    return back_substitute(lambda, dx);
  }

  /// Undamped reduced (Schur-complemented) Hessian including the gauge constraint.
  Eigen::MatrixXd reduced_hessian() const {
    Eigen::MatrixXd s = h_;
    Eigen::VectorXd b = g_;
    Eigen::VectorXd gauge_u = Eigen::VectorXd::Zero(num_reduced_);
    double gauge_c = 0.0, gauge_q = 0.0;
    eliminate_depth(0.0, s, b, gauge_u, gauge_c, gauge_q);
    if (fix_gauge_ && gauge_c > 0.0) s += gauge_u * gauge_u.transpose() / gauge_c;
    return s;
  }

  int pose_offset(int kf) const { return kf == 0 ? -1 : 6 * (kf - 1); }
  int imu_offset(int kf) const { return num_pose_ + 9 * kf; }

 private:
  struct Frame {
    std::vector<int> slots;  // keyframes coupled to this frame's depths; slot 0 = itself
    int stride = 0;
    std::vector<double> hdd, gd, hvec;
  };

  int slot_of(int frame, int kf) const {
    const auto& s = frames_[frame].slots;
    return static_cast<int>(std::find(s.begin(), s.end(), kf) - s.begin());
  }

  template <class A, class B>
  void add_pose_block(int ki, int kj, const A& ai, const B& aj) {
    const int oi = pose_offset(ki), oj = pose_offset(kj);
    if (oi < 0 || oj < 0) return;
    h_.block<6, 6>(oi, oj) += ai.transpose() * aj;
  }

  void accumulate() {
    const BaProblem& pr = problem_;
    for (const auto& b : reprojection_residuals(pr)) {
      const auto& e = pr.edges[b.edge];
      const int i = e.source, j = e.target;
      const double d = pr.keyframes[i].depth.values[b.pixel];
      const Vector2 jl = b.d_depth * d;
      add_pose_block(i, i, b.d_pose_source, b.d_pose_source);
      add_pose_block(i, j, b.d_pose_source, b.d_pose_target);
      add_pose_block(j, i, b.d_pose_target, b.d_pose_source);
      add_pose_block(j, j, b.d_pose_target, b.d_pose_target);
      if (pose_offset(i) >= 0) g_.segment<6>(pose_offset(i)) -= b.d_pose_source.transpose() * b.residual;
      if (pose_offset(j) >= 0) g_.segment<6>(pose_offset(j)) -= b.d_pose_target.transpose() * b.residual;
      Frame& f = frames_[i];
      f.hdd[b.pixel] += jl.squaredNorm();
      f.gd[b.pixel] -= jl.dot(b.residual);
      double* hv = &f.hvec[static_cast<size_t>(b.pixel) * f.stride];
      Eigen::Map<Vector6>(hv) += b.d_pose_source.transpose() * jl;
      Eigen::Map<Vector6>(hv + 6 * slot_of(i, j)) += b.d_pose_target.transpose() * jl;
    }
    for (const auto& b : stereo_residuals(pr)) {
      const double d = pr.keyframes[b.keyframe].depth.values[b.pixel];
      const Vector2 jl = b.d_depth * d;
      Frame& f = frames_[b.keyframe];
      f.hdd[b.pixel] += jl.squaredNorm();
      f.gd[b.pixel] -= jl.dot(b.residual);
    }
    for (const auto& b : depth_prior_residuals(pr)) {
      const double jl = b.d_depth * pr.keyframes[b.keyframe].depth.values[b.pixel];
      Frame& f = frames_[b.keyframe];
      f.hdd[b.pixel] += jl * jl;
      f.gd[b.pixel] -= jl * b.residual;
    }
    for (const auto& b : inertial_residuals(pr)) {
      const int kf[2] = {b.keyframe, b.keyframe + 1};
      std::vector<std::pair<int, int>> cols;  // (jacobian column, system offset) in chunks
      for (int s = 0; s < 2; ++s) {
        const int po = pose_offset(kf[s]);
        for (int c = 0; c < 6; ++c)
          if (po >= 0) cols.emplace_back(15 * s + c, po + c);
        for (int c = 0; c < 9; ++c) cols.emplace_back(15 * s + 6 + c, imu_offset(kf[s]) + c);
      }
      const auto& jac = b.weighted.jacobian;
      const auto& r = b.weighted.residual;
      for (const auto& [ca, oa] : cols) {
        g_[oa] -= jac.col(ca).dot(r);
        for (const auto& [cb, ob] : cols) h_(oa, ob) += jac.col(ca).dot(jac.col(cb));
      }
    }
  }

  void eliminate_depth(double lambda, Eigen::MatrixXd& s, Eigen::VectorXd& b, Eigen::VectorXd& gauge_u,
                       double& gauge_c, double& gauge_q) const {
    for (size_t fi = 0; fi < frames_.size(); ++fi) {
      const Frame& f = frames_[fi];
      const int m = f.stride;
      Eigen::MatrixXd local = Eigen::MatrixXd::Zero(m, m);
      Eigen::VectorXd local_b = Eigen::VectorXd::Zero(m);
      Eigen::VectorXd local_u = Eigen::VectorXd::Zero(m);
      for (size_t p = 0; p < f.hdd.size(); ++p) {
        if (f.hdd[p] <= 0.0) continue;
        const double inv = 1.0 / (f.hdd[p] + lambda);
        Eigen::Map<const Eigen::VectorXd> hv(&f.hvec[p * m], m);
        local.noalias() -= inv * hv * hv.transpose();
        local_b.noalias() -= (inv * f.gd[p]) * hv;
        if (fi == 0 && fix_gauge_) {
          local_u.noalias() += inv * hv;
          gauge_c += inv;
          gauge_q += inv * f.gd[p];
        }
      }
      for (size_t a = 0; a < f.slots.size(); ++a) {
        const int oa = pose_offset(f.slots[a]);
        if (oa < 0) continue;
        b.segment<6>(oa) += local_b.segment<6>(6 * a);
        if (fi == 0) gauge_u.segment<6>(oa) += local_u.segment<6>(6 * a);
        for (size_t c = 0; c < f.slots.size(); ++c) {
          const int oc = pose_offset(f.slots[c]);
          if (oc < 0) continue;
          s.block<6, 6>(oa, oc) += local.block<6, 6>(6 * a, 6 * c);
        }
      }
    }
  }

  BaStep back_substitute(double lambda, const Eigen::VectorXd& dx) const {
    const int n = static_cast<int>(frames_.size());
    BaStep step;
    step.poses.assign(n, Vector6::Zero());
    for (int i = 1; i < n; ++i) step.poses[i] = dx.segment<6>(pose_offset(i));
    if (problem_.inertial) {
      step.imu.assign(n, Vector9::Zero());
      for (int i = 0; i < n; ++i) step.imu[i] = dx.segment<9>(imu_offset(i));
    }
    step.log_depth.resize(n);
    for (int fi = 0; fi < n; ++fi) {
      const Frame& f = frames_[fi];
      const int m = f.stride;
      Eigen::VectorXd local_dx = Eigen::VectorXd::Zero(m);
      for (size_t a = 0; a < f.slots.size(); ++a) {
        const int oa = pose_offset(f.slots[a]);
        if (oa >= 0) local_dx.segment<6>(6 * a) = dx.segment<6>(oa);
      }
      auto& out = step.log_depth[fi];
      out.assign(f.hdd.size(), 0.0);
      double gauge_c = 0.0, gauge_q = 0.0;
      for (size_t p = 0; p < f.hdd.size(); ++p) {
        if (f.hdd[p] <= 0.0) continue;
        const double inv = 1.0 / (f.hdd[p] + lambda);
        Eigen::Map<const Eigen::VectorXd> hv(&f.hvec[p * m], m);
        const double r = f.gd[p] - hv.dot(local_dx);
        out[p] = inv * r;
        gauge_c += inv;
        gauge_q += inv * r;
      }
      if (fi == 0 && fix_gauge_ && gauge_c > 0.0) {
        const double shift = gauge_q / gauge_c;
        for (size_t p = 0; p < f.hdd.size(); ++p)
          if (f.hdd[p] > 0.0) out[p] -= shift / (f.hdd[p] + lambda);
      }
    }
    return step;
  }

  const BaProblem& problem_;
  int num_pose_ = 0;
  int num_reduced_ = 0;
  bool fix_gauge_ = false;
  Eigen::MatrixXd h_;
  Eigen::VectorXd g_;
  std::vector<Frame> frames_;
};

}  // namespace detail

/// One damped Gauss-Newton increment computed through the Schur complement.
inline BaStep compute_step(const BaProblem& problem, double lambda) {
  return detail::BaLinearSystem(problem).solve(lambda);
}

/// Applies an increment: poses by left multiplication, depths multiplicatively.
inline void apply_step(BaProblem& problem, const BaStep& step) {
  for (size_t i = 0; i < problem.keyframes.size(); ++i) {
    auto& kf = problem.keyframes[i];
    kf.pose = RigidTransform::exp(step.poses[i]) * kf.pose;
    for (size_t p = 0; p < kf.depth.size(); ++p)
      if (kf.depth.valid[p]) kf.depth.values[p] *= std::exp(step.log_depth[i][p]);
  }
  if (problem.inertial && !step.imu.empty()) {
    for (size_t i = 0; i < problem.keyframes.size(); ++i) {
      auto& s = problem.inertial->states[i];
      s.velocity += step.imu[i].segment<3>(0);
      s.bias.accel += step.imu[i].segment<3>(3);
      s.bias.gyro += step.imu[i].segment<3>(6);
    }
  }
}

/// Damped Gauss-Newton with multiplicative damping (x10 on rejection, x0.5 on
/// acceptance). Objective is non-increasing over accepted steps.
inline BaResult solve(const BaProblem& input, int iterations, double damping) {
  input.validate();
  BaProblem state = input;
  BaResult result;
  result.scale_gauge_fixed = state.scale_gauge_fixed();
  double cost = total_cost(state);
  result.cost_history.push_back(cost);
  double lambda = damping;

  for (int it = 0; it < iterations; ++it) {
    const detail::BaLinearSystem system(state);
    bool accepted = false;
    double new_cost = cost;
    for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
      BaProblem candidate = state;
      apply_step(candidate, system.solve(lambda));
      new_cost = total_cost(candidate);
      if (std::isfinite(new_cost) && new_cost <= cost) {
        state = std::move(candidate);
        accepted = true;
        lambda = std::max(lambda * 0.5, 1e-12);
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
    ++result.iterations;
    const double decrease = cost - new_cost;
    cost = new_cost;
    result.cost_history.push_back(cost);
    if (decrease <= state.settings.relative_tolerance * std::max(cost, 1e-300) || cost < 1e-28) break;
  }

  // Covariance from the undamped reduced system at the final state.
  const int n = static_cast<int>(state.keyframes.size());
  result.pose_covariance = Eigen::MatrixXd::Zero(6 * n, 6 * n);
  {
    const detail::BaLinearSystem system(state);
    const Eigen::MatrixXd s = system.reduced_hessian();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
    const auto& ev = eig.eigenvalues();
    const double max_ev = ev.cwiseAbs().maxCoeff();
    Eigen::VectorXd inv_ev(ev.size());
    for (Eigen::Index k = 0; k < ev.size(); ++k) {
      if (ev[k] <= 1e-12 * max_ev) {
        result.gauge_deficient = true;
        inv_ev[k] = 0.0;
      } else {
        inv_ev[k] = 1.0 / ev[k];
      }
    }
    if (result.gauge_deficient)
      log_warning("ba: reduced system is rank deficient (unfixed gauge freedom)");
    const Eigen::MatrixXd cov = eig.eigenvectors() * inv_ev.asDiagonal() * eig.eigenvectors().transpose();
    const int np = 6 * (n - 1);
    result.pose_covariance.bottomRightCorner(np, np) = cov.topLeftCorner(np, np);
  }
  result.keyframes = std::move(state.keyframes);
  if (state.inertial) result.imu_states = state.inertial->states;
  return result;
}

inline BaResult solve(const BaProblem& problem) {
  return solve(problem, problem.settings.max_iterations, problem.settings.initial_damping);
}

}  // namespace mvpose
