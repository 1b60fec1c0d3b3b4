#pragma once

// Object pose from NOCS <-> depth correspondences: closed-form similarity fit
// (Umeyama) inside RANSAC, and the covariance of the fitted Sim(3).
//
// The estimate maps canonical (NOCS) coordinates into the camera frame:
//   X_xyz ~= s R X_nocs + t.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/liegroups.hpp"

namespace mvpose {

using Matrix7 = Eigen::Matrix<double, 7, 7>;

struct PointCorrespondences {
  Points3 nocs;  // canonical, unitless
  Points3 xyz;   // camera frame, meters

  Eigen::Index size() const { return nocs.rows(); }

  void validate() const {
    if (nocs.rows() != xyz.rows()) throw InputError("registration: nocs/xyz row count mismatch");
    if (nocs.rows() < 3) throw InputError("registration: need at least 3 correspondences");
    if (!nocs.allFinite() || !xyz.allFinite()) throw InputError("registration: non-finite coordinates");
  }
};

struct RansacParams {
  int max_iterations = 1000;
  double threshold = 0.01;  // meters
  double min_inlier_fraction = 0.25;
  double confidence = 0.999;
  std::uint64_t seed = 0;
  int max_refinements = 10;
};

/// Residual standard deviation floor (meters) used by pose_covariance, so
/// that exact fits still yield an invertible covariance.
inline constexpr double kMinResidualSigma = 1e-4;

struct ObjectPoseEstimate {
  SimilarityTransform transform;  // canonical -> camera
  std::vector<int> inliers;
  Matrix7 covariance = Matrix7::Zero();
  bool degenerate = false;
  double residual_sigma = 0.0;
};

namespace detail {

inline Points3 gather(const Points3& p, const std::vector<int>& idx) {
  Points3 out(static_cast<Eigen::Index>(idx.size()), 3);
  for (size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = p.row(idx[k]);
  return out;
}

/// Ratio of the second to the first singular value of the centred points:
/// ~0 for collinear or coincident sets.
inline double spread_ratio(const Points3& p) {
  const Eigen::RowVector3d mu = p.colwise().mean();
  const Eigen::Matrix3d c = (p.rowwise() - mu).transpose() * (p.rowwise() - mu);
  const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(c).eigenvalues();
  const double extent = 1e-12 * std::max(1.0, mu.norm());
  if (!(ev[2] > extent * extent * static_cast<double>(p.rows()))) return 0.0;
  return std::sqrt(std::max(ev[1], 0.0) / ev[2]);
}

}  // namespace detail

/// Least-squares similarity with dst ~= s R src + t.
inline SimilarityTransform umeyama(const Points3& src, const Points3& dst) {
  if (src.rows() != dst.rows() || src.rows() < 3) throw InputError("umeyama: need >= 3 paired points");
  if (detail::spread_ratio(src) < 1e-6)
    throw DegenerateConfiguration("umeyama: source points are collinear or coincident");
  const double n = static_cast<double>(src.rows());
  const Eigen::RowVector3d mu_s = src.colwise().mean();
  const Eigen::RowVector3d mu_d = dst.colwise().mean();
  const Points3 cs = src.rowwise() - mu_s;
  const Points3 cd = dst.rowwise() - mu_d;
  const double var_s = cs.squaredNorm() / n;
  const Matrix3 sigma = cd.transpose() * cs / n;
  Eigen::JacobiSVD<Matrix3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vector3 sign = Vector3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) sign[2] = -1.0;
  const Matrix3 r = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  const double s = svd.singularValues().dot(sign) / var_s;
  if (!(s > 0.0)) throw DegenerateConfiguration("umeyama: non-positive scale (target points coincide)");
  const Vector3 t = mu_d.transpose() - s * r * mu_s.transpose();
  return {s, Rotation(r), t};
}

inline SimilarityTransform umeyama(const PointCorrespondences& c) {
  c.validate();
  return umeyama(c.nocs, c.xyz);
}

/// Per-point residual norms |T * nocs - xyz|.
inline Eigen::VectorXd registration_residuals(const SimilarityTransform& t, const PointCorrespondences& c) {
  const Points3 pred = t.apply(c.nocs);
  return (pred - c.xyz).rowwise().norm();
}

/// d(T * x - y)/d(delta) for the left perturbation T <- exp(delta) T.
inline Eigen::Matrix<double, 3, 7> registration_jacobian(const SimilarityTransform& t, const Vector3& nocs) {
  const Vector3 y = t * nocs;
  Eigen::Matrix<double, 3, 7> j;
  j << -hat(y), Matrix3::Identity(), y;
  return j;
}

struct RegistrationCovariance {
  Matrix7 covariance = Matrix7::Zero();
  bool degenerate = false;
  double residual_sigma = 0.0;
};

/// sigma^2 (J^T J)^-1 over the inliers, sigma^2 = RSS / (3 N - 7) floored at
/// sigma_floor^2. Rank-deficient J^T J falls back to the pseudo-inverse.
inline RegistrationCovariance pose_covariance(const PointCorrespondences& c, const SimilarityTransform& t,
                                              const std::vector<int>& inliers,
                                              double sigma_floor = kMinResidualSigma) {
  if (inliers.empty()) throw InputError("pose_covariance: empty inlier set");
  Matrix7 jtj = Matrix7::Zero();
  double rss = 0.0;
  for (int i : inliers) {
    const Vector3 x = c.nocs.row(i).transpose();
    const Eigen::Matrix<double, 3, 7> j = registration_jacobian(t, x);
    jtj += j.transpose() * j;
    rss += (t * x - c.xyz.row(i).transpose()).squaredNorm();
  }
  RegistrationCovariance out;
  const int dof = 3 * static_cast<int>(inliers.size()) - 7;
  const double var = dof > 0 ? rss / dof : 0.0;
  out.residual_sigma = std::max(std::sqrt(var), sigma_floor);
  Eigen::SelfAdjointEigenSolver<Matrix7> eig(jtj);
  const auto& ev = eig.eigenvalues();
  Eigen::Matrix<double, 7, 1> inv = Eigen::Matrix<double, 7, 1>::Zero();
  for (int k = 0; k < 7; ++k) {
    if (ev[k] > 1e-12 * ev[6])
      inv[k] = 1.0 / ev[k];
    else
      out.degenerate = true;
  }
  out.covariance = out.residual_sigma * out.residual_sigma * eig.eigenvectors() * inv.asDiagonal() *
                   eig.eigenvectors().transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

/// RANSAC over minimal 3-point Umeyama hypotheses with adaptive termination,
/// followed by iterated refits on the inlier set. Deterministic for a seed.
inline ObjectPoseEstimate ransac_register(const PointCorrespondences& c, const RansacParams& params = {}) {
  c.validate();
  if (!(params.threshold > 0.0) || params.max_iterations < 1) throw InputError("ransac: invalid parameters");
  const int n = static_cast<int>(c.size());
  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  auto score = [&](const SimilarityTransform& t, std::vector<int>& inliers, double& cost) {
    const Eigen::VectorXd r = registration_residuals(t, c);
    inliers.clear();
    cost = 0.0;
    for (int i = 0; i < n; ++i) {
      if (r[i] < params.threshold) {
        inliers.push_back(i);
        cost += r[i] * r[i];
      }
    }
  };

  std::vector<int> best_inliers, inliers;
  double best_cost = std::numeric_limits<double>::infinity();
  int budget = params.max_iterations;
  for (int it = 0; it < budget; ++it) {
    int s[3];
    s[0] = pick(rng);
    do s[1] = pick(rng); while (s[1] == s[0]);
    do s[2] = pick(rng); while (s[2] == s[0] || s[2] == s[1]);
    const std::vector<int> sample(s, s + 3);
    SimilarityTransform hyp;
    try {
      hyp = umeyama(detail::gather(c.nocs, sample), detail::gather(c.xyz, sample));
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    double cost;
    score(hyp, inliers, cost);
    if (inliers.size() > best_inliers.size() || (inliers.size() == best_inliers.size() && cost < best_cost)) {
      best_inliers = inliers;
      best_cost = cost;
      const double w = static_cast<double>(best_inliers.size()) / n;
      const double p_fail = 1.0 - w * w * w;
      if (p_fail <= 0.0) {
        budget = std::min(budget, it + 1);
      } else {
        const double need = std::log(1.0 - params.confidence) / std::log(p_fail);
        if (std::isfinite(need)) budget = std::min(budget, static_cast<int>(std::ceil(need)));
      }
    }
  }

  const auto min_inliers = static_cast<size_t>(std::max(3.0, std::ceil(params.min_inlier_fraction * n)));
  if (best_inliers.size() < min_inliers)
    throw RegistrationFailure("ransac: no hypothesis reached the minimum inlier fraction");

  ObjectPoseEstimate out;
  out.inliers = best_inliers;
  for (int r = 0; r < params.max_refinements; ++r) {
    SimilarityTransform refit;
    try {
      refit = umeyama(detail::gather(c.nocs, out.inliers), detail::gather(c.xyz, out.inliers));
    } catch (const DegenerateConfiguration&) {
      throw RegistrationFailure("ransac: inlier set is degenerate");
    }
    double cost;
    score(refit, inliers, cost);
    out.transform = refit;
    if (inliers.size() < min_inliers) break;
    if (inliers == out.inliers) break;
    out.inliers = inliers;
  }
  const RegistrationCovariance cov = pose_covariance(c, out.transform, out.inliers);
  out.covariance = cov.covariance;
  out.degenerate = cov.degenerate;
  out.residual_sigma = cov.residual_sigma;
  return out;
}

}  // namespace mvpose
