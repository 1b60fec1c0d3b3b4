#pragma once

// Rotations SO(3), rigid transforms SE(3) and similarity transforms Sim(3).
//
// Tangent coordinates are ordered (rotation, translation[, log-scale]):
//   SE(3):  (wx wy wz  rx ry rz)
//   Sim(3): (wx wy wz  rx ry rz  sigma)
// A group element acts on a point as  p -> s * R * p + t  (s = 1 for SE(3)).
// Rotations are stored as unit quaternions and re-normalised after every
// composition.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <iosfwd>
#include <limits>
#include <istream>
#include <ostream>

namespace mvpose {

using Vector3 = Eigen::Vector3d;
using Matrix3 = Eigen::Matrix3d;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using Vector7 = Eigen::Matrix<double, 7, 1>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;
using Matrix7 = Eigen::Matrix<double, 7, 7>;
using Matrix4 = Eigen::Matrix4d;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Matrix3 hat(const Vector3& w) {
  Matrix3 m;
  m << 0.0, -w.z(), w.y(),  //
      w.z(), 0.0, -w.x(),   //
      -w.y(), w.x(), 0.0;
  return m;
}

inline Vector3 vee(const Matrix3& m) {
  return Vector3(0.5 * (m(2, 1) - m(1, 2)), 0.5 * (m(0, 2) - m(2, 0)),
                 0.5 * (m(1, 0) - m(0, 1)));
}

class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}
  // Unit input is kept as is so text round trips are exact.
  explicit Rotation(const Eigen::Quaterniond& q)
      : q_(std::abs(q.squaredNorm() - 1.0) <= 4 * std::numeric_limits<double>::epsilon() ? q : q.normalized()) {}
  explicit Rotation(const Matrix3& m) : q_(Eigen::Quaterniond(m).normalized()) {}

  static Rotation identity() { return {}; }

  static Rotation exp(const Vector3& w) {
    const double theta2 = w.squaredNorm();
    const double theta = std::sqrt(theta2);
    double real, imag_factor;
    if (theta < 1e-8) {
      real = 1.0 - theta2 / 8.0;
      imag_factor = 0.5 - theta2 / 48.0;
    } else {
      real = std::cos(0.5 * theta);
      imag_factor = std::sin(0.5 * theta) / theta;
    }
    const Vector3 v = imag_factor * w;
    return Rotation(Eigen::Quaterniond(real, v.x(), v.y(), v.z()));
  }

  /// Rotation vector with angle in [0, pi]. At exactly pi the axis sign is
  /// fixed so that its largest-magnitude component is positive (first index
  /// wins ties); this is the axis picked from the largest diagonal entry of
  /// R + I.
  Vector3 log() const {
    double w = q_.w();
    Vector3 v = q_.vec();
    if (w < 0.0) {
      w = -w;
      v = -v;
    }
    const double n = v.norm();
    if (n < 1e-8) {
      const double n2 = n * n;
      return (2.0 / w) * (1.0 - n2 / (3.0 * w * w)) * v;
    }
    if (w == 0.0) {
      Eigen::Index k = 0;
      v.cwiseAbs().maxCoeff(&k);
      if (v[k] < 0.0) v = -v;
    }
    const double theta = 2.0 * std::atan2(n, w);
    return (theta / n) * v;
  }

  Rotation inverse() const { return Rotation(q_.conjugate(), Normalized{}); }
  Rotation operator*(const Rotation& other) const { return Rotation(q_ * other.q_); }
  Vector3 operator*(const Vector3& p) const { return q_ * p; }

  Matrix3 matrix() const { return q_.toRotationMatrix(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }
  double angle() const { return log().norm(); }

 private:
  struct Normalized {};
  Rotation(const Eigen::Quaterniond& q, Normalized) : q_(q) {}
  Eigen::Quaterniond q_;
};

namespace detail {

/// M_k(sigma) = integral_0^1 u^k exp(sigma u) du.
inline double exp_moment(int k, double sigma) {
  if (std::abs(sigma) < 2.0) {
    double sum = 0.0;
    double coeff = 1.0;  // sigma^m / m!
    for (int m = 0; m < 60; ++m) {
      const double term = coeff / static_cast<double>(k + m + 1);
      sum += term;
      if (std::abs(term) < 1e-18 * std::abs(sum)) break;
      coeff *= sigma / static_cast<double>(m + 1);
    }
    return sum;
  }
  const double es = std::exp(sigma);
  double m = std::expm1(sigma) / sigma;
  for (int j = 1; j <= k; ++j) m = (es - j * m) / sigma;
  return m;
}

/// Coefficients of W = a*Omega + b*Omega^2 + c*I, the translational block of
/// the Sim(3) exponential: W = integral_0^1 exp(sigma u) exp(u Omega) du.
struct SimVCoefficients {
  double a, b, c;
};

inline SimVCoefficients sim3_v_coefficients(double theta, double sigma) {
  SimVCoefficients k{};
  k.c = exp_moment(0, sigma);
  if (theta < 1e-3) {
    const double t2 = theta * theta;
    const double t4 = t2 * t2;
    k.a = exp_moment(1, sigma) - t2 / 6.0 * exp_moment(3, sigma) + t4 / 120.0 * exp_moment(5, sigma);
    k.b = 0.5 * exp_moment(2, sigma) - t2 / 24.0 * exp_moment(4, sigma) +
          t4 / 720.0 * exp_moment(6, sigma);
    return k;
  }
  const double s = std::exp(sigma);
  const double st = std::sin(theta);
  const double half = std::sin(0.5 * theta);
  const double one_minus_b = -std::expm1(sigma) + s * 2.0 * half * half;  // 1 - s cos(theta)
  const double c2 = theta * theta + sigma * sigma;
  k.a = (s * st * sigma + one_minus_b * theta) / (theta * c2);
  k.b = (k.c - (-one_minus_b * sigma + s * st * theta) / c2) / (theta * theta);
  return k;
}

inline Matrix3 sim3_v(const Vector3& w, double sigma) {
  const SimVCoefficients k = sim3_v_coefficients(w.norm(), sigma);
  const Matrix3 omega = hat(w);
  return k.a * omega + k.b * omega * omega + k.c * Matrix3::Identity();
}

/// Sum_{n>=0} ad^n / (n+1)!
template <int N>
Eigen::Matrix<double, N, N> phi1_series(const Eigen::Matrix<double, N, N>& ad) {
  using Mat = Eigen::Matrix<double, N, N>;
  Mat sum = Mat::Identity();
  Mat term = Mat::Identity();
  for (int n = 1; n < 80; ++n) {
    term = (term * ad) / static_cast<double>(n + 1);
    sum += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  return sum;
}

}  // namespace detail

class SimilarityTransform;

class RigidTransform {
 public:
  using Tangent = Vector6;
  using AdjointMatrix = Matrix6;
  static constexpr int kDof = 6;

  RigidTransform() : translation_(Vector3::Zero()) {}
  RigidTransform(const Rotation& r, const Vector3& t) : rotation_(r), translation_(t) {}

  static RigidTransform identity() { return {}; }

  static RigidTransform exp(const Tangent& v) {
    const Vector3 w = v.head<3>();
    return {Rotation::exp(w), detail::sim3_v(w, 0.0) * v.tail<3>()};
  }

  Tangent log() const {
    const Vector3 w = rotation_.log();
    Tangent v;
    v.head<3>() = w;
    v.tail<3>() = detail::sim3_v(w, 0.0).lu().solve(translation_);
    return v;
  }

  RigidTransform inverse() const {
    const Rotation ri = rotation_.inverse();
    return {ri, -(ri * translation_)};
  }

  RigidTransform operator*(const RigidTransform& o) const {
    return {rotation_ * o.rotation_, rotation_ * o.translation_ + translation_};
  }
  inline SimilarityTransform operator*(const SimilarityTransform& o) const;

  Vector3 operator*(const Vector3& p) const { return rotation_ * p + translation_; }

  Points3 apply(const Points3& pts) const {
    const Matrix3 r = rotation_.matrix();
    Points3 out = pts * r.transpose();
    out.rowwise() += translation_.transpose();
    return out;
  }

  /// Ad(T) v = log(T exp(v) T^-1) for small v.
  AdjointMatrix adjoint() const {
    const Matrix3 r = rotation_.matrix();
    AdjointMatrix ad = AdjointMatrix::Zero();
    ad.block<3, 3>(0, 0) = r;
    ad.block<3, 3>(3, 3) = r;
    ad.block<3, 3>(3, 0) = hat(translation_) * r;
    return ad;
  }

  Matrix4 matrix() const {
    Matrix4 m = Matrix4::Identity();
    m.block<3, 3>(0, 0) = rotation_.matrix();
    m.block<3, 1>(0, 3) = translation_;
    return m;
  }

  const Rotation& rotation() const { return rotation_; }
  const Vector3& translation() const { return translation_; }
  double scale() const { return 1.0; }

 private:
  Rotation rotation_;
  Vector3 translation_;
};

class SimilarityTransform {
 public:
  using Tangent = Vector7;
  using AdjointMatrix = Matrix7;
  static constexpr int kDof = 7;

  SimilarityTransform() : scale_(1.0), translation_(Vector3::Zero()) {}
  SimilarityTransform(double s, const Rotation& r, const Vector3& t)
      : scale_(s), rotation_(r), translation_(t) {}
  /// Promotion of a rigid transform (scale 1).
  explicit SimilarityTransform(const RigidTransform& t)
      : scale_(1.0), rotation_(t.rotation()), translation_(t.translation()) {}

  static SimilarityTransform identity() { return {}; }

  static SimilarityTransform exp(const Tangent& v) {
    const Vector3 w = v.head<3>();
    const double sigma = v[6];
    return {std::exp(sigma), Rotation::exp(w), detail::sim3_v(w, sigma) * v.segment<3>(3)};
  }

  Tangent log() const {
    const Vector3 w = rotation_.log();
    const double sigma = std::log(scale_);
    Tangent v;
    v.head<3>() = w;
    v.segment<3>(3) = detail::sim3_v(w, sigma).lu().solve(translation_);
    v[6] = sigma;
    return v;
  }

  SimilarityTransform inverse() const {
    const Rotation ri = rotation_.inverse();
    const double si = 1.0 / scale_;
    return {si, ri, -si * (ri * translation_)};
  }

  SimilarityTransform operator*(const SimilarityTransform& o) const {
    return {scale_ * o.scale_, rotation_ * o.rotation_,
            scale_ * (rotation_ * o.translation_) + translation_};
  }
  SimilarityTransform operator*(const RigidTransform& o) const {
    return *this * SimilarityTransform(o);
  }

  Vector3 operator*(const Vector3& p) const { return scale_ * (rotation_ * p) + translation_; }

  Points3 apply(const Points3& pts) const {
    const Matrix3 sr = scale_ * rotation_.matrix();
    Points3 out = pts * sr.transpose();
    out.rowwise() += translation_.transpose();
    return out;
  }

  AdjointMatrix adjoint() const {
    const Matrix3 r = rotation_.matrix();
    AdjointMatrix ad = AdjointMatrix::Zero();
    ad.block<3, 3>(0, 0) = r;
    ad.block<3, 3>(3, 0) = hat(translation_) * r;
    ad.block<3, 3>(3, 3) = scale_ * r;
    ad.block<3, 1>(3, 6) = -translation_;
    ad(6, 6) = 1.0;
    return ad;
  }

  Matrix4 matrix() const {
    Matrix4 m = Matrix4::Identity();
    m.block<3, 3>(0, 0) = scale_ * rotation_.matrix();
    m.block<3, 1>(0, 3) = translation_;
    return m;
  }

  double scale() const { return scale_; }
  const Rotation& rotation() const { return rotation_; }
  const Vector3& translation() const { return translation_; }
  RigidTransform rigid() const { return {rotation_, translation_}; }

 private:
  double scale_;
  Rotation rotation_;
  Vector3 translation_;
};

inline SimilarityTransform RigidTransform::operator*(const SimilarityTransform& o) const {
  return SimilarityTransform(*this) * o;
}

// Free-function spellings used by the rest of the library.
template <class G>
G compose(const G& a, const G& b) {
  return a * b;
}
template <class G>
G inverse(const G& t) {
  return t.inverse();
}
template <class G>
Points3 apply(const G& t, const Points3& pts) {
  return t.apply(pts);
}

/// Lie bracket matrix ad(v) for SE(3): ad(v) u = [v, u].
inline Matrix6 ad_se3(const Vector6& v) {
  Matrix6 m = Matrix6::Zero();
  const Matrix3 w = hat(v.head<3>());
  m.block<3, 3>(0, 0) = w;
  m.block<3, 3>(3, 3) = w;
  m.block<3, 3>(3, 0) = hat(v.tail<3>());
  return m;
}

inline Matrix7 ad_sim3(const Vector7& v) {
  Matrix7 m = Matrix7::Zero();
  const Matrix3 w = hat(v.head<3>());
  m.block<3, 3>(0, 0) = w;
  m.block<3, 3>(3, 0) = hat(v.segment<3>(3));
  m.block<3, 3>(3, 3) = w + v[6] * Matrix3::Identity();
  m.block<3, 1>(3, 6) = -v.segment<3>(3);
  return m;
}

/// Left Jacobian: exp(v + d) ~= exp(J_l(v) d) exp(v).
inline Matrix6 left_jacobian(const Vector6& v) { return detail::phi1_series<6>(ad_se3(v)); }
inline Matrix7 left_jacobian(const Vector7& v) { return detail::phi1_series<7>(ad_sim3(v)); }
inline Matrix6 left_jacobian_inverse(const Vector6& v) { return left_jacobian(v).inverse(); }
inline Matrix7 left_jacobian_inverse(const Vector7& v) { return left_jacobian(v).inverse(); }

/// SO(3) right Jacobian: exp(w + d) ~= exp(w) exp(J_r(w) d).
inline Matrix3 so3_right_jacobian(const Vector3& w) {
  const double theta = w.norm();
  const Matrix3 h = hat(w);
  if (theta < 1e-5) return Matrix3::Identity() - 0.5 * h + h * h / 6.0;
  const double t2 = theta * theta;
  return Matrix3::Identity() - (1.0 - std::cos(theta)) / t2 * h +
         (theta - std::sin(theta)) / (t2 * theta) * h * h;
}

inline Matrix3 so3_right_jacobian_inverse(const Vector3& w) {
  const double theta = w.norm();
  const Matrix3 h = hat(w);
  if (theta < 1e-5) return Matrix3::Identity() + 0.5 * h + h * h / 12.0;
  const double t2 = theta * theta;
  return Matrix3::Identity() + 0.5 * h +
         (1.0 / t2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta))) * h * h;
}

inline Matrix3 so3_left_jacobian(const Vector3& w) { return so3_right_jacobian(-w); }

/// Embedding of an SE(3) tangent into Sim(3) coordinates (log-scale 0).
inline Eigen::Matrix<double, 7, 6> se3_to_sim3_tangent() {
  Eigen::Matrix<double, 7, 6> p = Eigen::Matrix<double, 7, 6>::Zero();
  p.topRows<6>().setIdentity();
  return p;
}

// Text form: eight numbers  s qw qx qy qz tx ty tz  (s = 1 for rigid transforms).

inline void write_transform(std::ostream& os, double s, const Rotation& r, const Vector3& t) {
  const auto& q = r.quaternion();
  const auto old = os.precision(17);
  os << s << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << t.x() << ' '
     << t.y() << ' ' << t.z();
  os.precision(old);
}

inline std::ostream& operator<<(std::ostream& os, const RigidTransform& t) {
  write_transform(os, 1.0, t.rotation(), t.translation());
  return os;
}

inline std::ostream& operator<<(std::ostream& os, const SimilarityTransform& t) {
  write_transform(os, t.scale(), t.rotation(), t.translation());
  return os;
}

/// Reads the eight-number form; returns false on a malformed record.
inline bool read_transform(std::istream& is, SimilarityTransform& out) {
  double s, qw, qx, qy, qz, tx, ty, tz;
  if (!(is >> s >> qw >> qx >> qy >> qz >> tx >> ty >> tz)) return false;
  if (!(s > 0.0)) return false;
  out = SimilarityTransform(s, Rotation(Eigen::Quaterniond(qw, qx, qy, qz)), Vector3(tx, ty, tz));
  return true;
}

inline bool read_transform(std::istream& is, RigidTransform& out) {
  SimilarityTransform sim;
  if (!read_transform(is, sim)) return false;
  out = sim.rigid();
  return true;
}

}  // namespace mvpose
