#pragma once

// In-memory form of a sequence directory: everything the pipeline consumes
// plus optional ground truth for evaluation. All poses are expressed in the
// reference frame, which is the first keyframe's camera frame.

#include <optional>
#include <string>
#include <vector>

#include "mvpose/association.hpp"
#include "mvpose/ba.hpp"
#include "mvpose/camera.hpp"
#include "mvpose/imu.hpp"
#include "mvpose/liegroups.hpp"

namespace mvpose {

/// Categories whose canonical models are rotationally symmetric about y.
inline bool is_symmetric_category(const std::string& category) {
  return category == "bottle" || category == "bowl" || category == "can";
}

struct ObjectGroundTruth {
  int id = 0;
  std::string category;
  SimilarityTransform pose;  // canonical -> ref
  Vector3 extents = Vector3::Ones();  // canonical bounding box size
};

/// Fused estimate of one object track.
struct FusedObject {
  int id = 0;
  std::string category;
  SimilarityTransform pose;                  // canonical -> ref
  Matrix7 covariance = Matrix7::Zero();      // tangent of the pose, left perturbation
  Vector3 extents = Vector3::Ones();         // canonical bounding box size
  double confidence = 0.0;                   // total registration inliers
};

struct ImuInput {
  std::vector<ImuSample> samples;
  InertialCalibration calibration;  // gravity given in the ref frame when known
  ImuNoise noise;
};

struct Sequence {
  Intrinsics intrinsics;
  std::vector<double> timestamps;  // one per keyframe
  std::vector<CorrespondenceField> flows;  // full resolution, keyframe pairs
  std::optional<RigidTransform> left_to_right;  // T_{c'<-c}
  std::vector<CorrespondenceField> stereo;  // one per keyframe when present
  std::vector<DepthMap> depths;              // measured depth per keyframe when present
  double depth_sigma = 0.01;                 // relative sigma of measured depth
  std::optional<ImuInput> imu;
  std::vector<std::vector<Detection>> detections;  // per keyframe

  std::vector<RigidTransform> gt_poses;  // T_{c_i<-ref}
  std::vector<ObjectGroundTruth> gt_objects;

  int num_keyframes() const { return static_cast<int>(timestamps.size()); }
  bool has_ground_truth() const { return !gt_poses.empty(); }
};

}  // namespace mvpose
