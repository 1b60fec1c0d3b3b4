#pragma once

// Cross-frame object association by 2D box IoU and category, and the track
// lifecycle (open on unmatched detection, close after too many misses).

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "mvpose/camera.hpp"
#include "mvpose/error.hpp"
#include "mvpose/registration.hpp"

namespace mvpose {

/// Axis-aligned box in continuous pixel coordinates, [x0, x1) x [y0, y1).
struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return std::max(0.0, x1 - x0); }
  double height() const { return std::max(0.0, y1 - y0); }
  double area() const { return width() * height(); }
  bool valid() const { return x1 > x0 && y1 > y0; }

  /// Tight box around the set pixels of a mask (pixel u covers [u, u+1)).
  static Box from_mask(const Field<std::uint8_t>& mask) {
    int u0 = mask.width, v0 = mask.height, u1 = -1, v1 = -1;
    for (int v = 0; v < mask.height; ++v) {
      for (int u = 0; u < mask.width; ++u) {
        if (!mask.at(u, v)) continue;
        u0 = std::min(u0, u);
        v0 = std::min(v0, v);
        u1 = std::max(u1, u);
        v1 = std::max(v1, v);
      }
    }
    if (u1 < 0) return {};
    return {double(u0), double(v0), double(u1 + 1), double(v1 + 1)};
  }
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

/// Canonical coordinates live in the cube [-kNocsHalfExtent, kNocsHalfExtent]^3.
inline constexpr double kNocsHalfExtent = 0.5;

struct Detection {
  int frame = 0;
  std::string category;
  double score = 1.0;
  Box box;
  Field<std::uint8_t> mask;  // 1 inside the instance
  PointField nocs;           // canonical coordinates, valid inside the mask

  /// Clamps NOCS into the canonical cube, drops NOCS outside the mask and
  /// recomputes the tight box.
  void sanitize() {
    if (nocs.width != mask.width || nocs.height != mask.height)
      throw InputError("detection: mask and NOCS map sizes differ");
    for (size_t i = 0; i < nocs.size(); ++i) {
      if (!mask.values[i]) {
        nocs.valid[i] = 0;
        continue;
      }
      if (!nocs.valid[i]) continue;
      if (!nocs.values[i].allFinite()) {
        nocs.valid[i] = 0;
        continue;
      }
      nocs.values[i] = nocs.values[i].cwiseMax(-kNocsHalfExtent).cwiseMin(kNocsHalfExtent);
    }
    box = Box::from_mask(mask);
  }
};

struct TrackObservation {
  int frame = 0;
  Detection detection;
  std::optional<ObjectPoseEstimate> pose;
};

struct ObjectTrack {
  int id = 0;
  std::string category;
  std::vector<TrackObservation> observations;
  int missed = 0;
  bool closed = false;

  const Detection& latest() const { return observations.back().detection; }
};

struct MatchCandidate {
  int track = 0;      // track id
  int detection = 0;  // detection index
  double iou = 0.0;
};

/// Greedy one-to-one matching in descending IoU; ties go to the lower track
/// id, then the lower detection index. Returns the accepted pairs in order.
inline std::vector<MatchCandidate> greedy_match(std::vector<MatchCandidate> candidates) {
  std::sort(candidates.begin(), candidates.end(), [](const MatchCandidate& a, const MatchCandidate& b) {
    return std::tie(b.iou, a.track, a.detection) < std::tie(a.iou, b.track, b.detection);
  });
  std::vector<MatchCandidate> out;
  std::vector<int> used_tracks, used_dets;
  for (const auto& c : candidates) {
    if (std::find(used_tracks.begin(), used_tracks.end(), c.track) != used_tracks.end()) continue;
    if (std::find(used_dets.begin(), used_dets.end(), c.detection) != used_dets.end()) continue;
    used_tracks.push_back(c.track);
    used_dets.push_back(c.detection);
    out.push_back(c);
  }
  return out;
}

struct AssociationSettings {
  double iou_threshold = 0.3;
  int max_missed = 10;  // consecutive unmatched keyframes before a track closes
};

struct AssociationResult {
  std::vector<int> track_of_detection;  // track id per input detection
  std::vector<int> new_tracks;
  std::vector<int> closed_tracks;
};

/// Owns the track store; one updater at a time.
class TrackManager {
 public:
  explicit TrackManager(AssociationSettings settings = {}) : settings_(settings) {}

  const std::vector<ObjectTrack>& tracks() const { return tracks_; }
  const AssociationSettings& settings() const { return settings_; }

  ObjectTrack& track(int id) {
    for (auto& t : tracks_)
      if (t.id == id) return t;
    throw InputError("association: unknown track id " + std::to_string(id));
  }

  /// Matches one frame's detections against each open track's most recent
  /// detection; unmatched detections open new tracks.
  AssociationResult update(int frame, const std::vector<Detection>& detections) {
    std::vector<MatchCandidate> candidates;
    for (const auto& t : tracks_) {
      if (t.closed) continue;
      for (size_t d = 0; d < detections.size(); ++d) {
        if (detections[d].category != t.category) continue;
        const double v = iou(t.latest().box, detections[d].box);
        if (v > settings_.iou_threshold) candidates.push_back({t.id, static_cast<int>(d), v});
      }
    }
    AssociationResult out;
    out.track_of_detection.assign(detections.size(), -1);
    std::vector<int> matched;
    for (const auto& m : greedy_match(std::move(candidates))) {
      out.track_of_detection[m.detection] = m.track;
      matched.push_back(m.track);
    }
    for (auto& t : tracks_) {
      if (t.closed) continue;
      if (std::find(matched.begin(), matched.end(), t.id) != matched.end()) {
        t.missed = 0;
      } else if (++t.missed >= settings_.max_missed) {
        t.closed = true;
        out.closed_tracks.push_back(t.id);
      }
    }
    for (size_t d = 0; d < detections.size(); ++d) {
      int id = out.track_of_detection[d];
      if (id < 0) {
        ObjectTrack t;
        t.id = next_id_++;
        t.category = detections[d].category;
        tracks_.push_back(std::move(t));
        id = tracks_.back().id;
        out.track_of_detection[d] = id;
        out.new_tracks.push_back(id);
      }
      track(id).observations.push_back({frame, detections[d], std::nullopt});
    }
    return out;
  }

 private:
  AssociationSettings settings_;
  std::vector<ObjectTrack> tracks_;
  int next_id_ = 0;
};

}  // namespace mvpose
