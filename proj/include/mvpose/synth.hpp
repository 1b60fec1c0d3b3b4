#pragma once

// Synthetic scenes standing in for the learned frontend: a camera orbiting a
// few parametric objects on a ground plane. Produces depth, masks, NOCS maps,
// flow and stereo correspondence fields and an IMU stream, all consistent
// with the ground-truth states by construction.
//
// World frame: z up, ground plane z = 0, gravity (0, 0, -9.81). Emitted data
// is re-expressed in the reference frame (first keyframe camera).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mvpose/association.hpp"
#include "mvpose/ba.hpp"
#include "mvpose/camera.hpp"
#include "mvpose/error.hpp"
#include "mvpose/imu.hpp"
#include "mvpose/liegroups.hpp"
#include "mvpose/log.hpp"
#include "mvpose/sequence.hpp"

namespace mvpose {

enum class Shape { kBox, kCylinder, kBowl };

/// Parametric canonical model inside the unit cube centred at the origin,
/// with y as the up axis. Cylinder and bowl are symmetric about y.
struct CanonicalModel {
  Shape shape = Shape::kBox;
  Vector3 half = Vector3(0.45, 0.3, 0.35);  // box half extents; cylinder (r, h/2, r); bowl (r, r/2, r)

  static CanonicalModel for_category(const std::string& category) {
    if (category == "can") return {Shape::kCylinder, Vector3(0.3, 0.45, 0.3)};
    if (category == "bottle") return {Shape::kCylinder, Vector3(0.2, 0.5, 0.2)};
    if (category == "bowl") return {Shape::kBowl, Vector3(0.5, 0.25, 0.5)};
    return {Shape::kBox, Vector3(0.45, 0.3, 0.35)};
  }

  Vector3 extents() const { return 2.0 * half; }

  /// Nearest positive ray parameter of o + t d hitting the solid.
  std::optional<double> intersect(const Vector3& o, const Vector3& d) const {
    switch (shape) {
      case Shape::kBox: return intersect_box(o, d);
      case Shape::kCylinder: return intersect_cylinder(o, d);
      case Shape::kBowl: return intersect_bowl(o, d);
    }
    return std::nullopt;
  }

  /// Random points on the model surface, roughly uniform by area.
  Points3 surface_points(int n, std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Points3 out(n, 3);
    for (int k = 0; k < n; ++k) out.row(k) = sample_surface(u, rng).transpose();
    return out;
  }

 private:
  std::optional<double> intersect_box(const Vector3& o, const Vector3& d) const {
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(d[a]) < 1e-300) {
        if (std::abs(o[a]) > half[a]) return std::nullopt;
        continue;
      }
      double ta = (-half[a] - o[a]) / d[a], tb = (half[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t0 > t1 || t1 <= 0.0) return std::nullopt;
    return t0 > 0.0 ? t0 : t1;
  }

  static void keep_min(std::optional<double>& best, double t) {
    if (t > 0.0 && (!best || t < *best)) best = t;
  }

  std::optional<double> intersect_cylinder(const Vector3& o, const Vector3& d) const {
    const double r = half.x(), hh = half.y();
    std::optional<double> best;
    const double a = d.x() * d.x() + d.z() * d.z();
    const double b = 2.0 * (o.x() * d.x() + o.z() * d.z());
    const double c = o.x() * o.x() + o.z() * o.z() - r * r;
    if (a > 1e-300) {
      const double disc = b * b - 4.0 * a * c;
      if (disc >= 0.0) {
        const double s = std::sqrt(disc);
        for (double t : {(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)})
          if (std::abs(o.y() + t * d.y()) <= hh) keep_min(best, t);
      }
    }
    if (std::abs(d.y()) > 1e-300) {
      for (double y : {-hh, hh}) {
        const double t = (y - o.y()) / d.y();
        const Vector3 p = o + t * d;
        if (p.x() * p.x() + p.z() * p.z() <= r * r) keep_min(best, t);
      }
    }
    return best;
  }

  // Lower half of a ball of radius r centred at (0, r/2, 0); flat face up.
  std::optional<double> intersect_bowl(const Vector3& o, const Vector3& d) const {
    const double r = half.x(), yc = half.y();
    const Vector3 c(0.0, yc, 0.0);
    std::optional<double> best;
    const Vector3 oc = o - c;
    const double a = d.squaredNorm(), b = 2.0 * oc.dot(d), cc = oc.squaredNorm() - r * r;
    const double disc = b * b - 4.0 * a * cc;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)})
        if (o.y() + t * d.y() <= yc) keep_min(best, t);
    }
    if (std::abs(d.y()) > 1e-300) {
      const double t = (yc - o.y()) / d.y();
      const Vector3 p = o + t * d;
      if (p.x() * p.x() + p.z() * p.z() <= r * r) keep_min(best, t);
    }
    return best;
  }

  Vector3 sample_surface(std::uniform_real_distribution<double>& u, std::mt19937_64& rng) const {
    const double pi = std::numbers::pi;
    switch (shape) {
      case Shape::kBox: {
        const Vector3 h = half;
        const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
        double pick = u(rng) * (areas[0] + areas[1] + areas[2]);
        int axis = 0;
        while (axis < 2 && pick > areas[axis]) pick -= areas[axis++];
        Vector3 p(h.x() * (2 * u(rng) - 1), h.y() * (2 * u(rng) - 1), h.z() * (2 * u(rng) - 1));
        p[axis] = u(rng) < 0.5 ? -h[axis] : h[axis];
        return p;
      }
      case Shape::kCylinder: {
        const double r = half.x(), hh = half.y();
        const double side = 2 * pi * r * 2 * hh, caps = 2 * pi * r * r;
        const double phi = 2 * pi * u(rng);
        if (u(rng) * (side + caps) < side) return {r * std::cos(phi), hh * (2 * u(rng) - 1), r * std::sin(phi)};
        const double rho = r * std::sqrt(u(rng));
        return {rho * std::cos(phi), u(rng) < 0.5 ? -hh : hh, rho * std::sin(phi)};
      }
      case Shape::kBowl: {
        const double r = half.x(), yc = half.y();
        const double phi = 2 * pi * u(rng);
        if (u(rng) < 2.0 / 3.0) {  // hemisphere area 2 pi r^2 vs disk pi r^2
          const double y = -r * u(rng);  // uniform in height is uniform in area on a sphere
          const double rho = std::sqrt(std::max(0.0, r * r - y * y));
          return {rho * std::cos(phi), yc + y, rho * std::sin(phi)};
        }
        const double rho = r * std::sqrt(u(rng));
        return {rho * std::cos(phi), yc, rho * std::sin(phi)};
      }
    }
    return Vector3::Zero();
  }
};

struct ObjectSpec {
  std::string category;
  SimilarityTransform pose;  // canonical -> world
};

/// Orbit around `center`: angle theta(t) = start + rate t + accel t^2 / 2 on a
/// circle of `radius`, height bobbing sinusoidally, camera yawed with the
/// orbit and pitched down by `tilt`.
struct TrajectorySpec {
  Vector3 center = Vector3::Zero();
  double radius = 1.0;
  double height = 0.6;
  double bob_amplitude = 0.05;
  double bob_frequency = 2.0;  // rad/s
  double start_angle = 0.0;
  double angular_rate = 0.5;    // rad/s
  double angular_accel = 0.1;   // rad/s^2
  double tilt = 0.5;            // rad
};

struct NoiseSpec {
  double flow_sigma = 0.0;             // px
  double flow_outlier_fraction = 0.0;
  double outlier_weight = 1e-4;        // confidence of injected flow outliers (1/px^2)
  double min_flow_sigma = 0.05;        // px, sigma floor used for confidences
  double depth_sigma = 0.0;            // relative
  double nocs_sigma = 0.0;             // canonical units
  double nocs_outlier_fraction = 0.0;
  double gyro_noise_density = 0.0;     // rad/s/sqrt(Hz)
  double accel_noise_density = 0.0;    // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 0.0;         // rad/s/sqrt(s)
  double accel_bias_walk = 0.0;        // m/s^2/sqrt(s)
  Vector3 gyro_bias = Vector3::Zero();
  Vector3 accel_bias = Vector3::Zero();
};

struct SceneSpec {
  Intrinsics intrinsics{140.0, 140.0, 79.5, 59.5, 160, 120};
  std::optional<double> stereo_baseline = 0.1;  // m
  std::vector<ObjectSpec> objects;
  TrajectorySpec trajectory;
  int keyframes = 30;
  double keyframe_interval = 0.1;  // s
  double imu_rate = 200.0;         // Hz, 0 disables the stream
  RigidTransform body_to_camera;   // T_{c<-b}
  int edge_span = 2;               // flow edges connect keyframes up to this far apart, both ways
  int min_object_pixels = 12;      // smaller visible instances are not detected
  NoiseSpec noise;
  std::uint64_t seed = 0;

  void validate() const {
    intrinsics.validate();
    if (keyframes < 2) throw InputError("scene: need at least two keyframes");
    if (!(keyframe_interval > 0.0)) throw InputError("scene: keyframe interval must be positive");
    if (imu_rate < 0.0) throw InputError("scene: negative IMU rate");
    if (edge_span < 1) throw InputError("scene: edge span must be >= 1");
    if (stereo_baseline && !(*stereo_baseline > 0.0)) throw InputError("scene: stereo baseline must be positive");
    if (!(trajectory.radius > 0.0)) throw InputError("scene: trajectory radius must be positive");
    for (const auto& o : objects)
      if (!(o.pose.scale() > 0.0)) throw InputError("scene: object scale must be positive");
  }
};

/// Canonical y axis to world z, yawed about z, resting on the ground plane.
inline SimilarityTransform place_on_ground(const std::string& category, double scale, double yaw, double x,
                                           double y) {
  Matrix3 up;
  up << 1, 0, 0,  //
      0, 0, -1,   //
      0, 1, 0;
  const CanonicalModel m = CanonicalModel::for_category(category);
  const Rotation r = Rotation::exp(Vector3(0, 0, yaw)) * Rotation(up);
  return {scale, r, Vector3(x, y, scale * m.half.y())};
}

/// Three objects of different shapes near the orbit centre.
inline SceneSpec default_scene(int keyframes = 30, int objects = 3, std::uint64_t seed = 0) {
  SceneSpec s;
  s.keyframes = keyframes;
  s.seed = seed;
  s.body_to_camera = RigidTransform(Rotation::exp(Vector3(0.02, -0.01, 0.03)), Vector3(0.03, -0.01, 0.02));
  const ObjectSpec all[] = {
      {"mug", place_on_ground("mug", 0.22, 0.4, 0.15, 0.0)},
      {"can", place_on_ground("can", 0.18, 1.1, -0.12, 0.14)},
      {"bowl", place_on_ground("bowl", 0.25, -0.3, -0.06, -0.17)},
      {"bottle", place_on_ground("bottle", 0.2, 0.0, 0.05, 0.25)},
      {"laptop", place_on_ground("laptop", 0.3, 2.0, -0.3, -0.05)},
  };
  for (int k = 0; k < objects && k < 5; ++k) s.objects.push_back(all[k]);
  return s;
}

/// Per-pixel render output at some intrinsics.
struct Render {
  DepthMap depth;
  Field<int> owner;  // object index, -1 ground, -2 nothing hit
  PointField nocs;   // canonical hit point on object pixels
};

namespace detail {
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}
}  // namespace detail

class SyntheticScene {
 public:
  explicit SyntheticScene(SceneSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (const auto& o : spec_.objects) models_.push_back(CanonicalModel::for_category(o.category));
    ref_from_world_ = world_from_camera(timestamp(0)).inverse();
  }

  const SceneSpec& spec() const { return spec_; }
  double timestamp(int k) const { return k * spec_.keyframe_interval; }

  double angle(double t) const {
    const auto& tr = spec_.trajectory;
    return tr.start_angle + tr.angular_rate * t + 0.5 * tr.angular_accel * t * t;
  }
  double angle_rate(double t) const { return spec_.trajectory.angular_rate + spec_.trajectory.angular_accel * t; }

  /// T_{w<-c}(t).
  RigidTransform world_from_camera(double t) const {
    const auto& tr = spec_.trajectory;
    const double th = angle(t), b = tr.tilt;
    Matrix3 base;  // columns: camera x, y, z in the world at theta = 0
    base << 0, std::sin(b), -std::cos(b),  //
        1, 0, 0,                           //
        0, -std::cos(b), -std::sin(b);
    const Rotation r = Rotation::exp(Vector3(0, 0, th)) * Rotation(base);
    const Vector3 p = tr.center + Vector3(tr.radius * std::cos(th), tr.radius * std::sin(th),
                                          tr.height + tr.bob_amplitude * std::sin(tr.bob_frequency * t));
    return {r, p};
  }

  const RigidTransform& ref_from_world() const { return ref_from_world_; }

  /// T_{c<-ref} at time t.
  RigidTransform camera_pose_at(double t) const { return (ref_from_world_ * world_from_camera(t)).inverse(); }
  RigidTransform camera_pose(int k) const { return camera_pose_at(timestamp(k)); }

  /// Canonical -> ref.
  SimilarityTransform object_pose(int i) const {
    return SimilarityTransform(ref_from_world_) * spec_.objects[i].pose;
  }
  const CanonicalModel& model(int i) const { return models_[i]; }
  int num_objects() const { return static_cast<int>(models_.size()); }

  Vector3 gravity_ref() const { return ref_from_world_.rotation() * Vector3(0, 0, -kGravityMagnitude); }

  struct BodyKinematics {
    RigidTransform world_from_body;
    Vector3 velocity;      // world
    Vector3 acceleration;  // world
    Vector3 rate;          // body frame angular velocity
  };

  BodyKinematics body(double t) const {
    const auto& tr = spec_.trajectory;
    const double th = angle(t), thd = angle_rate(t), thdd = tr.angular_accel;
    const double w = tr.bob_frequency, a = tr.bob_amplitude;
    const Vector3 radial(std::cos(th), std::sin(th), 0), tangent(-std::sin(th), std::cos(th), 0);
    const Vector3 vel_c = tr.radius * thd * tangent + Vector3(0, 0, a * w * std::cos(w * t));
    const Vector3 acc_c = tr.radius * thdd * tangent - tr.radius * thd * thd * radial +
                          Vector3(0, 0, -a * w * w * std::sin(w * t));
    const RigidTransform wc = world_from_camera(t);
    const RigidTransform wb = wc * spec_.body_to_camera;
    const Vector3 lever = wc.rotation() * spec_.body_to_camera.translation();
    const Matrix3 omega = hat(Vector3(0, 0, thd)), omega_dot = hat(Vector3(0, 0, thdd));
    BodyKinematics k;
    k.world_from_body = wb;
    k.velocity = vel_c + omega * lever;
    k.acceleration = acc_c + (omega_dot + omega * omega) * lever;
    k.rate = wb.rotation().inverse() * Vector3(0, 0, thd);
    return k;
  }

  /// Body velocity expressed in the ref frame.
  Vector3 velocity_ref(double t) const { return ref_from_world_.rotation() * body(t).velocity; }

  /// Ray-cast render of keyframe k at the given intrinsics (pixel centres).
  Render render(int k, const Intrinsics& K) const {
    const RigidTransform wc = world_from_camera(timestamp(k));
    Render out{make_depth_map(K.width, K.height), Field<int>(K.width, K.height, -2),
               PointField(K.width, K.height, Vector3::Zero())};
    std::vector<SimilarityTransform> inv;
    for (const auto& o : spec_.objects) inv.push_back(o.pose.inverse());
    const Vector3 origin = wc.translation();
    for (int v = 0; v < K.height; ++v) {
      for (int u = 0; u < K.width; ++u) {
        const Vector3 dir = wc.rotation() * K.ray(u, v);
        double best = std::numeric_limits<double>::infinity();
        int owner = -2;
        Vector3 nocs = Vector3::Zero();
        for (size_t i = 0; i < inv.size(); ++i) {
          const Vector3 o = inv[i] * origin;
          const Vector3 dd = inv[i].scale() * (inv[i].rotation() * dir);
          const auto t = models_[i].intersect(o, dd);
          if (t && *t < best) {
            best = *t;
            owner = static_cast<int>(i);
            nocs = o + *t * dd;
          }
        }
        if (dir.z() < 0.0) {
          const double t = -origin.z() / dir.z();
          if (t < best) {
            best = t;
            owner = -1;
          }
        }
        if (owner == -2) continue;
        set_depth(out.depth, u, v, best);  // ray has unit z, so the parameter is the depth
        out.owner.at(u, v) = owner;
        out.owner.valid[out.owner.index(u, v)] = 1;
        if (owner >= 0) {
          out.nocs.at(u, v) = nocs;
          out.nocs.valid[out.nocs.index(u, v)] = 1;
        }
      }
    }
    return out;
  }

  /// Exact correspondences plus configured noise and outliers. Inlier
  /// confidence is the inverse variance (sigma floored at min_flow_sigma).
  CorrespondenceField noisy_field(int source, int target, const RigidTransform& rel, const DepthMap& depth,
                                  const Intrinsics& K, std::mt19937_64& rng) const {
    const NoiseSpec& n = spec_.noise;
    CorrespondenceField f;
    f.source = source;
    f.target = target;
    f.targets = warp(rel, depth, K);
    const double sigma = std::max(n.flow_sigma, n.min_flow_sigma);
    f.weights.assign(f.targets.size(), Vector2::Constant(1.0 / (sigma * sigma)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<size_t> valid;
    for (size_t p = 0; p < f.targets.size(); ++p) {
      if (!f.targets.valid[p]) continue;
      valid.push_back(p);
      if (n.flow_sigma > 0.0) f.targets.values[p] += n.flow_sigma * Vector2(gauss(rng), gauss(rng));
    }
    const auto outliers = static_cast<size_t>(std::llround(n.flow_outlier_fraction * valid.size()));
    std::shuffle(valid.begin(), valid.end(), rng);
    std::uniform_real_distribution<double> ux(-0.5, K.width - 0.5), uy(-0.5, K.height - 0.5);
    for (size_t k = 0; k < outliers && k < valid.size(); ++k) {
      f.targets.values[valid[k]] = Vector2(ux(rng), uy(rng));
      f.weights[valid[k]] = Vector2::Constant(n.outlier_weight);
    }
    f.sanitize();
    return f;
  }

  CorrespondenceField flow_field(int i, int j, const Intrinsics& K) const {
    auto rng = detail::stream_rng(spec_.seed, 1, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
    return noisy_field(i, j, camera_pose(j) * camera_pose(i).inverse(), render(i, K).depth, K, rng);
  }

  RigidTransform left_to_right() const { return {Rotation(), Vector3(-spec_.stereo_baseline.value_or(0.0), 0, 0)}; }

  CorrespondenceField stereo_field(int i, const Intrinsics& K) const {
    if (!spec_.stereo_baseline) throw InputError("scene: no stereo baseline configured");
    auto rng = detail::stream_rng(spec_.seed, 2, static_cast<std::uint64_t>(i));
    return noisy_field(i, i, left_to_right(), render(i, K).depth, K, rng);
  }

  DepthMap measured_depth(int k, const Render& r) const {
    auto rng = detail::stream_rng(spec_.seed, 3, static_cast<std::uint64_t>(k));
    std::normal_distribution<double> gauss(0.0, 1.0);
    DepthMap d = r.depth;
    if (spec_.noise.depth_sigma > 0.0)
      for (size_t p = 0; p < d.size(); ++p)
        if (d.valid[p]) set_depth(d, static_cast<int>(p % d.width), static_cast<int>(p / d.width),
                                  d.values[p] * (1.0 + spec_.noise.depth_sigma * gauss(rng)));
    return d;
  }

  /// Object masks and (noisy) NOCS maps from render ownership.
  std::vector<Detection> detections(int k, const Render& r) const {
    auto rng = detail::stream_rng(spec_.seed, 4, static_cast<std::uint64_t>(k));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> cube(-kNocsHalfExtent, kNocsHalfExtent);
    std::vector<Detection> out;
    for (int i = 0; i < num_objects(); ++i) {
      Detection d;
      d.frame = k;
      d.category = spec_.objects[i].category;
      d.mask = Field<std::uint8_t>(r.owner.width, r.owner.height, 0);
      d.nocs = PointField(r.owner.width, r.owner.height, Vector3::Zero());
      std::vector<size_t> pix;
      for (size_t p = 0; p < r.owner.size(); ++p) {
        if (r.owner.values[p] != i) continue;
        d.mask.values[p] = 1;
        d.mask.valid[p] = 1;
        d.nocs.values[p] = r.nocs.values[p];
        d.nocs.valid[p] = 1;
        pix.push_back(p);
      }
      if (static_cast<int>(pix.size()) < spec_.min_object_pixels) continue;
      if (spec_.noise.nocs_sigma > 0.0)
        for (size_t p : pix) d.nocs.values[p] += spec_.noise.nocs_sigma * Vector3(gauss(rng), gauss(rng), gauss(rng));
      const auto outliers = static_cast<size_t>(std::llround(spec_.noise.nocs_outlier_fraction * pix.size()));
      std::shuffle(pix.begin(), pix.end(), rng);
      for (size_t q = 0; q < outliers && q < pix.size(); ++q)
        d.nocs.values[pix[q]] = Vector3(cube(rng), cube(rng), cube(rng));
      d.sanitize();
      out.push_back(std::move(d));
    }
    return out;
  }

  /// Samples at multiples of 1/rate covering the keyframe span.
  std::vector<ImuSample> imu_stream(double rate) const {
    if (!(rate > 0.0)) throw InputError("scene: IMU rate must be positive");
    const NoiseSpec& n = spec_.noise;
    auto rng = detail::stream_rng(spec_.seed, 5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto g3 = [&] { return Vector3(gauss(rng), gauss(rng), gauss(rng)); };
    const double dt = 1.0 / rate;
    const double t_end = timestamp(spec_.keyframes - 1);
    const auto count = static_cast<int>(std::ceil(t_end * rate - 1e-9)) + 1;
    Vector3 bg = n.gyro_bias, ba = n.accel_bias;
    const Vector3 g_world(0, 0, -kGravityMagnitude);
    std::vector<ImuSample> out;
    for (int k = 0; k < count; ++k) {
      const double t = std::min(k * dt, t_end);
      const BodyKinematics b = body(t);
      ImuSample s;
      s.t = t;
      s.gyro = b.rate + bg + n.gyro_noise_density / std::sqrt(dt) * g3();
      s.accel = b.world_from_body.rotation().inverse() * (b.acceleration - g_world) + ba +
                n.accel_noise_density / std::sqrt(dt) * g3();
      out.push_back(s);
      bg += n.gyro_bias_walk * std::sqrt(dt) * g3();
      ba += n.accel_bias_walk * std::sqrt(dt) * g3();
    }
    return out;
  }

  /// Flow edges (i, j) with 0 < |i - j| <= edge_span.
  std::vector<std::pair<int, int>> edges() const {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < spec_.keyframes; ++i)
      for (int j = std::max(0, i - spec_.edge_span); j <= std::min(spec_.keyframes - 1, i + spec_.edge_span); ++j)
        if (i != j) out.emplace_back(i, j);
    return out;
  }

  /// The complete sequence, full resolution.
  Sequence generate() const {
    const Intrinsics& K = spec_.intrinsics;
    const int n = spec_.keyframes;
    Sequence s;
    s.intrinsics = K;
    std::vector<Render> renders;
    for (int k = 0; k < n; ++k) {
      s.timestamps.push_back(timestamp(k));
      s.gt_poses.push_back(camera_pose(k));
      renders.push_back(render(k, K));
    }
    for (auto [i, j] : edges()) {
      auto rng = detail::stream_rng(spec_.seed, 1, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
      s.flows.push_back(noisy_field(i, j, s.gt_poses[j] * s.gt_poses[i].inverse(), renders[i].depth, K, rng));
    }
    if (spec_.stereo_baseline) {
      s.left_to_right = left_to_right();
      for (int k = 0; k < n; ++k) {
        auto rng = detail::stream_rng(spec_.seed, 2, static_cast<std::uint64_t>(k));
        s.stereo.push_back(noisy_field(k, k, *s.left_to_right, renders[k].depth, K, rng));
      }
    }
    s.depth_sigma = std::max(spec_.noise.depth_sigma, 1e-3);
    std::vector<int> seen(num_objects(), 0);
    for (int k = 0; k < n; ++k) {
      s.depths.push_back(measured_depth(k, renders[k]));
      s.detections.push_back(detections(k, renders[k]));
      std::vector<int> pixels(num_objects(), 0);
      for (int o : renders[k].owner.values)
        if (o >= 0) ++pixels[o];
      for (int i = 0; i < num_objects(); ++i) seen[i] += pixels[i] >= spec_.min_object_pixels;
    }
    for (int i = 0; i < num_objects(); ++i)
      if (seen[i] < 3)
        log_warning("synth: object " + std::to_string(i) + " (" + spec_.objects[i].category +
                    ") is detected in fewer than 3 keyframes");
    if (spec_.imu_rate > 0.0) {
      ImuInput imu;
      imu.samples = imu_stream(spec_.imu_rate);
      imu.calibration.body_to_camera = spec_.body_to_camera;
      imu.calibration.gravity = gravity_ref();
      s.imu = std::move(imu);
    }
    for (int i = 0; i < num_objects(); ++i)
      s.gt_objects.push_back({i, spec_.objects[i].category, object_pose(i), models_[i].extents()});
    return s;
  }

 private:
  SceneSpec spec_;
  std::vector<CanonicalModel> models_;
  RigidTransform ref_from_world_;
};

}  // namespace mvpose
