#pragma once

// Detection-style metrics for category-level object poses: voxelised 3D IoU,
// symmetry-aware pose errors, all-point-interpolated AP per category and AP
// curves over threshold grids.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/liegroups.hpp"
#include "mvpose/registration.hpp"
#include "mvpose/sequence.hpp"

namespace mvpose {

/// Box of canonical size `extents` centred at the canonical origin, placed
/// by `pose` (canonical -> frame); metric size is pose.scale() * extents.
struct OrientedBox {
  SimilarityTransform pose;
  Vector3 extents = Vector3::Ones();

  void validate() const {
    if (!(extents.minCoeff() > 0.0) || !(pose.scale() > 0.0)) throw InputError("eval: box extents must be positive");
  }
  bool contains(const Vector3& p, const SimilarityTransform& inv) const {
    const Vector3 c = inv * p;
    return (c.cwiseAbs().array() <= 0.5 * extents.array()).all();
  }
  std::vector<Vector3> corners() const {
    std::vector<Vector3> out;
    for (int k = 0; k < 8; ++k) {
      const Vector3 c(k & 1 ? 0.5 : -0.5, k & 2 ? 0.5 : -0.5, k & 4 ? 0.5 : -0.5);
      out.push_back(pose * Vector3(c.cwiseProduct(extents)));
    }
    return out;
  }
};

/// IoU from a resolution^3 voxel grid over the joint axis-aligned bounding volume.
inline double iou3d(const OrientedBox& a, const OrientedBox& b, int resolution = 64) {
  a.validate();
  b.validate();
  Vector3 lo = Vector3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (const auto* box : {&a, &b})
    for (const auto& c : box->corners()) {
      lo = lo.cwiseMin(c);
      hi = hi.cwiseMax(c);
    }
  const SimilarityTransform ia = a.pose.inverse(), ib = b.pose.inverse();
  const Vector3 step = (hi - lo) / resolution;
  long inter = 0, uni = 0;
  for (int i = 0; i < resolution; ++i)
    for (int j = 0; j < resolution; ++j)
      for (int k = 0; k < resolution; ++k) {
        const Vector3 p = lo + Vector3((i + 0.5) * step.x(), (j + 0.5) * step.y(), (k + 0.5) * step.z());
        const bool in_a = a.contains(p, ia), in_b = b.contains(p, ib);
        inter += in_a && in_b;
        uni += in_a || in_b;
      }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct PoseError {
  double rotation_deg = 0.0;
  double translation_cm = 0.0;
};

/// Geodesic rotation error, or for y-symmetric categories the angle between
/// the canonical y axes (the exact minimum over rotations about y).
inline PoseError pose_error(const SimilarityTransform& pred, const SimilarityTransform& gt,
                            const std::string& category) {
  PoseError e;
  double angle;
  if (is_symmetric_category(category)) {
    const Vector3 yp = pred.rotation() * Vector3::UnitY(), yg = gt.rotation() * Vector3::UnitY();
    angle = std::atan2(yp.cross(yg).norm(), yp.dot(yg));
  } else {
    angle = (pred.rotation() * gt.rotation().inverse()).angle();
  }
  e.rotation_deg = angle * 180.0 / std::numbers::pi;
  e.translation_cm = 100.0 * (pred.translation() - gt.translation()).norm();
  return e;
}

struct Prediction {
  std::string category;
  OrientedBox box;
  double confidence = 0.0;
};

struct GroundTruthBox {
  std::string category;
  OrientedBox box;
};

/// Predictions and ground truth expressed in one common frame.
struct EvalFrame {
  std::vector<Prediction> predictions;
  std::vector<GroundTruthBox> ground_truth;
};

/// A match criterion: an IoU threshold, or rotation/translation limits.
struct Criterion {
  std::string name;
  double min_iou = -1.0;  // fraction; < 0 disables
  double max_rotation_deg = std::numeric_limits<double>::infinity();
  double max_translation_cm = std::numeric_limits<double>::infinity();
  bool uses_iou() const { return min_iou >= 0.0; }
};

inline std::vector<Criterion> standard_criteria() {
  return {{"IoU25", 0.25}, {"IoU50", 0.50}, {"IoU75", 0.75},    {"5deg2cm", -1, 5, 2},
          {"5deg5cm", -1, 5, 5}, {"10deg2cm", -1, 10, 2}, {"10deg5cm", -1, 10, 5}};
}

/// All-point interpolated area under the precision/recall curve, in [0, 1].
inline double average_precision(const std::vector<bool>& tp_sorted, int num_positive) {
  if (num_positive <= 0) return 0.0;
  std::vector<double> recall, precision;
  int tp = 0;
  for (size_t k = 0; k < tp_sorted.size(); ++k) {
    tp += tp_sorted[k];
    recall.push_back(static_cast<double>(tp) / num_positive);
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  for (int k = static_cast<int>(precision.size()) - 2; k >= 0; --k)
    precision[k] = std::max(precision[k], precision[k + 1]);
  double ap = 0.0, prev = 0.0;
  for (size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev) * precision[k];
    prev = recall[k];
  }
  return ap;
}

namespace detail {

struct PairScores {
  double iou = 0.0;
  PoseError error;
};

/// Per category, per frame: IoU and pose errors of every prediction/GT pair.
class ScoreTable {
 public:
  ScoreTable(const std::vector<EvalFrame>& frames, int resolution) : frames_(frames) {
    for (size_t f = 0; f < frames.size(); ++f) {
      const auto& fr = frames[f];
      auto& t = table_.emplace_back();
      t.resize(fr.predictions.size());
      for (size_t p = 0; p < fr.predictions.size(); ++p) {
        t[p].resize(fr.ground_truth.size());
        for (size_t g = 0; g < fr.ground_truth.size(); ++g) {
          if (fr.predictions[p].category != fr.ground_truth[g].category) continue;
          t[p][g].iou = iou3d(fr.predictions[p].box, fr.ground_truth[g].box, resolution);
          t[p][g].error = pose_error(fr.predictions[p].box.pose, fr.ground_truth[g].box.pose,
                                     fr.predictions[p].category);
        }
      }
    }
  }

  /// AP in [0, 1] for one category under a criterion; negative when the
  /// category has no ground truth.
  double ap(const std::string& category, const Criterion& c) const {
    struct Item {
      size_t frame, pred;
      double conf;
    };
    std::vector<Item> items;
    int positives = 0;
    for (size_t f = 0; f < frames_.size(); ++f) {
      for (size_t p = 0; p < frames_[f].predictions.size(); ++p)
        if (frames_[f].predictions[p].category == category) items.push_back({f, p, frames_[f].predictions[p].confidence});
      for (const auto& g : frames_[f].ground_truth) positives += g.category == category;
    }
    if (positives == 0) return -1.0;
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.conf > b.conf; });
    std::vector<std::vector<bool>> used(frames_.size());
    for (size_t f = 0; f < frames_.size(); ++f) used[f].assign(frames_[f].ground_truth.size(), false);
    std::vector<bool> tp;
    for (const auto& it : items) {
      const auto& fr = frames_[it.frame];
      int best = -1;
      double best_key = -std::numeric_limits<double>::infinity();
      for (size_t g = 0; g < fr.ground_truth.size(); ++g) {
        if (used[it.frame][g] || fr.ground_truth[g].category != category) continue;
        const PairScores& s = table_[it.frame][it.pred][g];
        if (c.uses_iou() && s.iou < c.min_iou) continue;
        if (s.error.rotation_deg > c.max_rotation_deg || s.error.translation_cm > c.max_translation_cm) continue;
        if (c.uses_iou() && c.min_iou <= 0.0 && s.iou <= 0.0) continue;
        const double key = c.uses_iou() ? s.iou : -s.error.translation_cm - s.error.rotation_deg;
        if (key > best_key) {
          best_key = key;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) used[it.frame][best] = true;
      tp.push_back(best >= 0);
    }
    return average_precision(tp, positives);
  }

 private:
  const std::vector<EvalFrame>& frames_;
  std::vector<std::vector<std::vector<PairScores>>> table_;
};

}  // namespace detail

struct ApCurve {
  std::string metric;  // "iou" (percent), "rotation" (deg), "translation" (cm)
  std::vector<double> thresholds;
  std::map<std::string, std::vector<double>> ap;  // per category plus "mean"
};

/// AP values in percent. Categories without ground truth are omitted; "mean"
/// averages over the remaining categories.
struct MetricsReport {
  bool empty = true;
  std::vector<std::string> categories;
  std::map<std::string, std::map<std::string, double>> ap;  // criterion -> category|"mean" -> AP
  std::vector<ApCurve> curves;

  void write_text(std::ostream& os) const {
    if (empty) {
      os << "no ground truth\n";
      return;
    }
    os << std::fixed << std::setprecision(1);
    os << std::left << std::setw(10) << "category";
    for (const auto& c : standard_criteria()) os << std::right << std::setw(10) << c.name;
    os << '\n';
    auto row = [&](const std::string& cat) {
      os << std::left << std::setw(10) << cat;
      for (const auto& c : standard_criteria()) os << std::right << std::setw(10) << ap.at(c.name).at(cat);
      os << '\n';
    };
    for (const auto& cat : categories) row(cat);
    row("mean");
    os << std::defaultfloat;
  }

  /// One row per (metric, threshold): per-category AP then the mean.
  void write_csv(std::ostream& os) const {
    os << "metric,threshold";
    for (const auto& cat : categories) os << ',' << cat;
    os << ",mean\n";
    const auto old = os.precision(10);
    for (const auto& curve : curves)
      for (size_t k = 0; k < curve.thresholds.size(); ++k) {
        os << curve.metric << ',' << curve.thresholds[k];
        for (const auto& cat : categories) os << ',' << curve.ap.at(cat)[k];
        os << ',' << curve.ap.at("mean")[k] << '\n';
      }
    os.precision(old);
  }
};

struct EvalSettings {
  int iou_resolution = 64;
  bool curves = true;
};

inline MetricsReport compute_map(const std::vector<EvalFrame>& frames, const EvalSettings& settings = {}) {
  MetricsReport report;
  std::vector<std::string> cats;
  for (const auto& f : frames)
    for (const auto& g : f.ground_truth) cats.push_back(g.category);
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
  report.categories = cats;
  report.empty = cats.empty();
  if (report.empty) return report;
  const detail::ScoreTable table(frames, settings.iou_resolution);
  auto evaluate = [&](const Criterion& c, std::map<std::string, double>& out) {
    double sum = 0.0;
    for (const auto& cat : cats) {
      out[cat] = 100.0 * table.ap(cat, c);
      sum += out[cat];
    }
    out["mean"] = sum / static_cast<double>(cats.size());
  };
  for (const auto& c : standard_criteria()) evaluate(c, report.ap[c.name]);
  if (!settings.curves) return report;
  auto curve = [&](const std::string& metric, int steps, double max, auto make) {
    ApCurve ac;
    ac.metric = metric;
    for (int k = 0; k <= steps; ++k) {
      const double th = max * k / steps;
      ac.thresholds.push_back(th);
      std::map<std::string, double> out;
      evaluate(make(th), out);
      for (const auto& [cat, v] : out) ac.ap[cat].push_back(v);
    }
    report.curves.push_back(std::move(ac));
  };
  curve("iou", 100, 100.0, [](double th) { return Criterion{"", th / 100.0}; });
  curve("rotation", 60, 60.0, [](double th) { return Criterion{"", -1.0, th}; });
  curve("translation", 60, 15.0, [](double th) {
    return Criterion{"", -1.0, std::numeric_limits<double>::infinity(), th};
  });
  return report;
}

/// Least-squares similarity mapping estimated camera centres onto the ground
/// truth ones (for runs without metric scale). Poses are T_{c<-ref}.
inline SimilarityTransform align_trajectories(const std::vector<RigidTransform>& est,
                                              const std::vector<RigidTransform>& gt) {
  if (est.size() != gt.size() || est.size() < 3) throw InputError("eval: need >= 3 paired poses to align");
  Points3 a(static_cast<Eigen::Index>(est.size()), 3), b(static_cast<Eigen::Index>(gt.size()), 3);
  for (size_t k = 0; k < est.size(); ++k) {
    a.row(static_cast<Eigen::Index>(k)) = est[k].inverse().translation().transpose();
    b.row(static_cast<Eigen::Index>(k)) = gt[k].inverse().translation().transpose();
  }
  return umeyama(a, b);
}

/// Root-mean-square camera centre error after applying `align` to the estimate.
inline double trajectory_rmse(const std::vector<RigidTransform>& est, const std::vector<RigidTransform>& gt,
                              const SimilarityTransform& align = {}) {
  if (est.size() != gt.size() || est.empty()) throw InputError("eval: trajectory length mismatch");
  double ss = 0.0;
  for (size_t k = 0; k < est.size(); ++k)
    ss += (align * est[k].inverse().translation() - gt[k].inverse().translation()).squaredNorm();
  return std::sqrt(ss / static_cast<double>(est.size()));
}

}  // namespace mvpose
