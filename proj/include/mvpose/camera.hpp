#pragma once

// Pinhole camera model, dense back-projection / projection and warping.
//
// Pixel (u, v) denotes the pixel centre; u runs along the image width.
// No lens distortion: inputs are assumed rectified.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/liegroups.hpp"

namespace mvpose {

using Vector2 = Eigen::Vector2d;

/// Points closer than this (along the optical axis) do not project.
inline constexpr double kMinProjectionDepth = 1e-3;

struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw InputError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InputError("intrinsics: empty image size");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height))
      throw InputError("intrinsics: principal point outside the image");
  }

  /// Intrinsics of the grid that keeps every `factor`-th pixel, where low-res
  /// pixel u' covers full-res pixels [factor*u', factor*u' + factor).
  Intrinsics downsampled(int factor) const {
    if (factor < 1) throw InputError("intrinsics: downsample factor must be >= 1");
    const double off = 0.5 * (factor - 1);
    Intrinsics k;
    k.fx = fx / factor;
    k.fy = fy / factor;
    k.cx = (cx - off) / factor;
    k.cy = (cy - off) / factor;
    k.width = width / factor;
    k.height = height / factor;
    return k;
  }

  /// Normalised ray (x/z, y/z, 1) through pixel (u, v).
  Vector3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }

  Vector2 project(const Vector3& p) const {
    return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
  }

  /// d(project)/d(p) at p.
  Eigen::Matrix<double, 2, 3> projection_jacobian(const Vector3& p) const {
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j;
    j << fx * iz, 0.0, -fx * p.x() * iz * iz,  //
        0.0, fy * iz, -fy * p.y() * iz * iz;
    return j;
  }

  bool in_bounds(const Vector2& px) const {
    return px.x() >= -0.5 && px.x() < width - 0.5 && px.y() >= -0.5 && px.y() < height - 0.5;
  }
};

/// Row-major H x W field of values with a validity mask.
template <class T>
struct Field {
  int width = 0;
  int height = 0;
  std::vector<T> values;
  std::vector<std::uint8_t> valid;

  Field() = default;
  Field(int w, int h, const T& init = T{})
      : width(w), height(h), values(static_cast<size_t>(w) * h, init),
        valid(static_cast<size_t>(w) * h, 0) {}

  size_t size() const { return values.size(); }
  size_t index(int u, int v) const { return static_cast<size_t>(v) * width + u; }
  T& at(int u, int v) { return values[index(u, v)]; }
  const T& at(int u, int v) const { return values[index(u, v)]; }
  bool is_valid(int u, int v) const { return valid[index(u, v)] != 0; }
  size_t valid_count() const {
    size_t n = 0;
    for (auto b : valid) n += b != 0;
    return n;
  }
};

/// Metric depth in meters. Valid entries are positive and finite.
using DepthMap = Field<double>;
using PointField = Field<Vector3>;
using PixelField = Field<Vector2>;

inline DepthMap make_depth_map(int width, int height) { return DepthMap(width, height, 0.0); }

inline void set_depth(DepthMap& d, int u, int v, double z) {
  const size_t i = d.index(u, v);
  d.values[i] = z;
  d.valid[i] = (std::isfinite(z) && z > 0.0) ? 1 : 0;
}

inline PointField backproject(const DepthMap& depth, const Intrinsics& k) {
  PointField out(depth.width, depth.height, Vector3::Zero());
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      const size_t i = depth.index(u, v);
      if (!depth.valid[i]) continue;
      out.values[i] = depth.values[i] * k.ray(u, v);
      out.valid[i] = 1;
    }
  }
  return out;
}

/// Points with z <= kMinProjectionDepth are flagged invalid, not thrown.
inline PixelField project(const PointField& pts, const Intrinsics& k) {
  PixelField out(pts.width, pts.height, Vector2::Zero());
  for (size_t i = 0; i < pts.size(); ++i) {
    if (!pts.valid[i]) continue;
    const Vector3& p = pts.values[i];
    if (!(p.z() > kMinProjectionDepth)) continue;
    out.values[i] = k.project(p);
    out.valid[i] = 1;
  }
  return out;
}

template <class G>
PointField transform_points(const G& t, const PointField& pts) {
  PointField out = pts;
  for (size_t i = 0; i < pts.size(); ++i)
    if (pts.valid[i]) out.values[i] = t * pts.values[i];
  return out;
}

/// Pixels of frame i predicted in frame j for relative pose T_ji; targets
/// falling outside the image are flagged invalid.
inline PixelField warp(const RigidTransform& t_ji, const DepthMap& depth_i, const Intrinsics& k) {
  PixelField out = project(transform_points(t_ji, backproject(depth_i, k)), k);
  for (size_t i = 0; i < out.size(); ++i)
    if (out.valid[i] && !k.in_bounds(out.values[i])) out.valid[i] = 0;
  return out;
}

/// Upsamples a depth map defined on the `factor`-decimated grid of a
/// full_width x full_height image. Inverse depth is interpolated bilinearly
/// over the valid neighbours (exact on planar surfaces).
inline DepthMap upsample_depth(const DepthMap& low, int factor, int full_width, int full_height) {
  DepthMap out = make_depth_map(full_width, full_height);
  const double off = 0.5 * (factor - 1);
  for (int v = 0; v < full_height; ++v) {
    const double y = (v - off) / factor;
    const int y0 = static_cast<int>(std::floor(y));
    const double fy = y - y0;
    for (int u = 0; u < full_width; ++u) {
      const double x = (u - off) / factor;
      const int x0 = static_cast<int>(std::floor(x));
      const double fx = x - x0;
      double acc = 0.0, wsum = 0.0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          int xs = std::clamp(x0 + dx, 0, low.width - 1);
          int ys = std::clamp(y0 + dy, 0, low.height - 1);
          if (!low.is_valid(xs, ys)) continue;
          const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          if (w <= 0.0) continue;
          acc += w / low.at(xs, ys);
          wsum += w;
        }
      }
      if (wsum > 1e-12) set_depth(out, u, v, wsum / acc);
    }
  }
  return out;
}

}  // namespace mvpose
