#include <gtest/gtest.h>

#include "mvpose/camera.hpp"
#include "test_support.hpp"

namespace mvpose {
namespace {

Intrinsics small_camera() { return {120.0, 110.0, 31.5, 23.5, 64, 48}; }

DepthMap random_depth(testing::Rng& rng, const Intrinsics& k) {
  DepthMap d = make_depth_map(k.width, k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) set_depth(d, u, v, rng.uniform(0.5, 5.0));
  return d;
}

TEST(Intrinsics, ValidateRejectsBadValues) {
  EXPECT_NO_THROW(small_camera().validate());
  Intrinsics k = small_camera();
  k.fx = -1;
  EXPECT_THROW(k.validate(), InputError);
  k = small_camera();
  k.cx = 100;
  EXPECT_THROW(k.validate(), InputError);
  k = small_camera();
  k.width = 0;
  EXPECT_THROW(k.validate(), InputError);
}

TEST(Camera, BackprojectProjectRoundTrip) {
  testing::Rng rng(1);
  const Intrinsics k = small_camera();
  const DepthMap d = random_depth(rng, k);
  const PixelField px = project(backproject(d, k), k);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      ASSERT_TRUE(px.is_valid(u, v));
      EXPECT_LT((px.at(u, v) - Vector2(u, v)).norm(), 1e-9);
    }
  }
}

TEST(Camera, IdentityWarpReturnsPixelGrid) {
  testing::Rng rng(2);
  const Intrinsics k = small_camera();
  const PixelField px = warp(RigidTransform::identity(), random_depth(rng, k), k);
  EXPECT_EQ(px.valid_count(), px.size());
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) EXPECT_LT((px.at(u, v) - Vector2(u, v)).norm(), 1e-9);
}

TEST(Camera, PointsBehindCameraAreFlagged) {
  const Intrinsics k = small_camera();
  DepthMap d = make_depth_map(k.width, k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) set_depth(d, u, v, 1.0);
  // Move the camera 2 m forward: everything ends up behind it.
  const RigidTransform t(Rotation::identity(), Vector3(0, 0, -2));
  EXPECT_EQ(warp(t, d, k).valid_count(), 0u);
  // Invalid depth never produces a valid pixel.
  set_depth(d, 3, 3, -1.0);
  set_depth(d, 4, 3, std::nan(""));
  const PixelField px = warp(RigidTransform::identity(), d, k);
  EXPECT_FALSE(px.is_valid(3, 3));
  EXPECT_FALSE(px.is_valid(4, 3));
  EXPECT_EQ(px.valid_count(), px.size() - 2);
}

TEST(Camera, WarpFlagsOutOfBoundsTargets) {
  const Intrinsics k = small_camera();
  DepthMap d = make_depth_map(k.width, k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) set_depth(d, u, v, 2.0);
  // Sideways shift of about a third of the image width.
  const RigidTransform t(Rotation::identity(), Vector3(0.35, 0, 0));
  const PixelField px = warp(t, d, k);
  EXPECT_GT(px.valid_count(), 0u);
  EXPECT_LT(px.valid_count(), px.size());
  for (size_t i = 0; i < px.size(); ++i)
    if (px.valid[i]) EXPECT_TRUE(k.in_bounds(px.values[i]));
}

TEST(Camera, WarpMatchesPointwiseComposition) {
  testing::Rng rng(3);
  const Intrinsics k = small_camera();
  const DepthMap d = random_depth(rng, k);
  const RigidTransform t(Rotation::exp(rng.vec3(0.02)), rng.vec3(0.02));
  const PixelField px = warp(t, d, k);
  for (int v = 0; v < k.height; v += 5) {
    for (int u = 0; u < k.width; u += 7) {
      if (!px.is_valid(u, v)) continue;
      const Vector3 p = t.rotation().matrix() * (d.at(u, v) * k.ray(u, v)) + t.translation();
      const Vector2 q(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
      EXPECT_LT((px.at(u, v) - q).norm(), 1e-9);
    }
  }
}

TEST(Camera, ProjectionJacobianMatchesFiniteDifferences) {
  testing::Rng rng(4);
  const Intrinsics k = small_camera();
  for (int n = 0; n < 100; ++n) {
    const Vector3 p(rng.normal(), rng.normal(), rng.uniform(0.5, 4.0));
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd { return k.project(p + Vector3(d)); };
    EXPECT_LT(testing::relative_error(k.projection_jacobian(p), testing::numeric_jacobian(f, 3)), 1e-6);
  }
}

TEST(Intrinsics, DownsampledGridIsConsistent) {
  const Intrinsics k{500.0, 480.0, 319.5, 239.5, 640, 480};
  for (int f : {1, 2, 4, 8}) {
    const Intrinsics lo = k.downsampled(f);
    EXPECT_EQ(lo.width, 640 / f);
    const Vector3 p(0.3, -0.2, 2.0);
    // The low-res pixel centre u' sits at full-res coordinate f*u' + (f-1)/2.
    const Vector2 full = k.project(p), low = lo.project(p);
    EXPECT_NEAR(f * low.x() + 0.5 * (f - 1), full.x(), 1e-9);
    EXPECT_NEAR(f * low.y() + 0.5 * (f - 1), full.y(), 1e-9);
  }
  EXPECT_THROW(k.downsampled(0), InputError);
}

TEST(Camera, UpsampleIsExactOnPlanesInTheInterior) {
  const Intrinsics full{400.0, 400.0, 159.5, 119.5, 320, 240};
  const int f = 4;
  const Intrinsics lo = full.downsampled(f);
  // Plane n.X = 3 with n tilted: inverse depth is affine in the pixel.
  const Vector3 n = Vector3(0.2, -0.1, 1.0).normalized();
  auto plane_depth = [&](const Intrinsics& k, int u, int v) { return 3.0 / n.dot(k.ray(u, v)); };
  DepthMap low = make_depth_map(lo.width, lo.height);
  for (int v = 0; v < lo.height; ++v)
    for (int u = 0; u < lo.width; ++u) set_depth(low, u, v, plane_depth(lo, u, v));
  const DepthMap up = upsample_depth(low, f, full.width, full.height);
  double worst = 0.0;
  for (int v = f; v < full.height - f; ++v)
    for (int u = f; u < full.width - f; ++u)
      worst = std::max(worst, std::abs(up.at(u, v) - plane_depth(full, u, v)) / plane_depth(full, u, v));
  EXPECT_LT(worst, 1e-12);
  EXPECT_EQ(up.valid_count(), up.size());
}

TEST(Camera, UpsampleIgnoresInvalidNeighbours) {
  DepthMap low = make_depth_map(4, 4);
  for (int v = 0; v < 4; ++v)
    for (int u = 0; u < 4; ++u) set_depth(low, u, v, 2.0);
  set_depth(low, 1, 1, 0.0);
  const DepthMap up = upsample_depth(low, 2, 8, 8);
  for (size_t i = 0; i < up.size(); ++i)
    if (up.valid[i]) EXPECT_DOUBLE_EQ(up.values[i], 2.0);
}

}  // namespace
}  // namespace mvpose
