#pragma once

// End-to-end run over a sequence: scale-aware dense BA on a decimated grid,
// per-keyframe dense depth and NOCS registration, track association and the
// camera-object pose graph, fed keyframe by keyframe.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <future>
#include <optional>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mvpose/association.hpp"
#include "mvpose/ba.hpp"
#include "mvpose/camera.hpp"
#include "mvpose/error.hpp"
#include "mvpose/eval.hpp"
#include "mvpose/imu.hpp"
#include "mvpose/io.hpp"
#include "mvpose/log.hpp"
#include "mvpose/posegraph.hpp"
#include "mvpose/registration.hpp"
#include "mvpose/sequence.hpp"

namespace mvpose {

enum class ScaleMode { kStereo, kImu, kDepth, kNone };

inline std::string to_string(ScaleMode m) {
  switch (m) {
    case ScaleMode::kStereo: return "stereo";
    case ScaleMode::kImu: return "imu";
    case ScaleMode::kDepth: return "depth";
    case ScaleMode::kNone: return "none";
  }
  return "?";
}

inline ScaleMode parse_scale_mode(const std::string& s) {
  if (s == "stereo") return ScaleMode::kStereo;
  if (s == "imu") return ScaleMode::kImu;
  if (s == "depth") return ScaleMode::kDepth;
  if (s == "none") return ScaleMode::kNone;
  throw InputError("unknown scale mode '" + s + "' (stereo|imu|depth|none)");
}

struct PipelineConfig {
  ScaleMode scale_mode = ScaleMode::kStereo;
  int ba_decimation = 5;           // odd; BA grid keeps every n-th pixel
  int ba_window = 6;               // keyframes in the local BA run after each insertion
  int ba_window_iterations = 4;
  BaSettings ba{20, 1e-4, std::nullopt, 1e-14};  // final global BA
  bool inertial_refinement = true;                // imu mode: BA with inertial factors after alignment
  int depth_iterations = 15;                      // per-pixel depth solves
  RansacParams ransac;
  int min_registration_points = 12;
  AssociationSettings association;
  GraphSettings graph;
  std::uint64_t seed = 0;
  std::string output_dir;

  void validate() const {
    if (ba_decimation < 1 || ba_decimation % 2 == 0) throw InputError("config: ba_decimation must be odd and >= 1");
    if (ba_window < 2) throw InputError("config: ba_window must be >= 2");
    if (ba_window_iterations < 0 || ba.max_iterations < 0) throw InputError("config: negative iteration count");
    if (depth_iterations < 1) throw InputError("config: depth_iterations must be >= 1");
    if (!(ransac.threshold > 0.0) || ransac.max_iterations < 1) throw InputError("config: invalid RANSAC parameters");
    if (min_registration_points < 3) throw InputError("config: min_registration_points must be >= 3");
    if (!(association.iou_threshold >= 0.0 && association.iou_threshold < 1.0))
      throw InputError("config: association threshold must be in [0, 1)");
    if (!(graph.loss.delta > 0.0)) throw InputError("config: Huber delta must be positive");
  }
};

/// Keys mirror the CLI flags; keys absent from `j` keep the values of `base`.
inline PipelineConfig pipeline_config_from(const nlohmann::json& j, PipelineConfig c = {}) {
  try {
    if (j.contains("scale_mode")) c.scale_mode = parse_scale_mode(j["scale_mode"].get<std::string>());
    c.ba_decimation = j.value("ba_decimation", c.ba_decimation);
    c.ba_window = j.value("ba_window", c.ba_window);
    c.ba_window_iterations = j.value("ba_window_iterations", c.ba_window_iterations);
    c.ba.max_iterations = j.value("ba_iterations", c.ba.max_iterations);
    c.ba.initial_damping = j.value("ba_damping", c.ba.initial_damping);
    c.inertial_refinement = j.value("inertial_refinement", c.inertial_refinement);
    c.depth_iterations = j.value("depth_iterations", c.depth_iterations);
    c.ransac.threshold = j.value("ransac_threshold", c.ransac.threshold);
    c.ransac.max_iterations = j.value("ransac_iterations", c.ransac.max_iterations);
    c.ransac.min_inlier_fraction = j.value("ransac_min_inlier_fraction", c.ransac.min_inlier_fraction);
    c.min_registration_points = j.value("min_registration_points", c.min_registration_points);
    c.association.iou_threshold = j.value("association_threshold", c.association.iou_threshold);
    c.association.max_missed = j.value("association_max_missed", c.association.max_missed);
    if (j.contains("loss")) {
      const auto s = j["loss"].get<std::string>();
      if (s != "huber" && s != "squared") throw InputError("config: loss must be huber or squared");
      c.graph.loss.kind = s == "huber" ? LossKind::kHuber : LossKind::kSquared;
    }
    c.graph.loss.delta = j.value("huber_delta", c.graph.loss.delta);
    c.graph.max_iterations = j.value("graph_iterations", c.graph.max_iterations);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json pipeline_config_json(const PipelineConfig& c) {
  return {{"scale_mode", to_string(c.scale_mode)},
          {"ba_decimation", c.ba_decimation},
          {"ba_window", c.ba_window},
          {"ba_window_iterations", c.ba_window_iterations},
          {"ba_iterations", c.ba.max_iterations},
          {"ba_damping", c.ba.initial_damping},
          {"inertial_refinement", c.inertial_refinement},
          {"depth_iterations", c.depth_iterations},
          {"ransac_threshold", c.ransac.threshold},
          {"ransac_iterations", c.ransac.max_iterations},
          {"ransac_min_inlier_fraction", c.ransac.min_inlier_fraction},
          {"min_registration_points", c.min_registration_points},
          {"association_threshold", c.association.iou_threshold},
          {"association_max_missed", c.association.max_missed},
          {"loss", c.graph.loss.kind == LossKind::kHuber ? "huber" : "squared"},
          {"huber_delta", c.graph.loss.delta},
          {"graph_iterations", c.graph.max_iterations},
          {"seed", c.seed},
          {"output_dir", c.output_dir}};
}

struct SingleViewEstimate {
  int keyframe = 0;
  int detection = 0;
  int track = 0;
  std::string category;
  ObjectPoseEstimate registration;  // canonical -> camera
  SimilarityTransform pose;         // canonical -> ref through the BA camera pose
  Vector3 half_extent = Vector3::Zero();
};

struct StageTiming {
  double ba = 0.0;
  double registration = 0.0;  // dense depth, association and RANSAC
  double graph = 0.0;
  double total = 0.0;
};

struct RunResult {
  ScaleMode scale_mode = ScaleMode::kStereo;
  std::vector<double> timestamps;
  std::vector<RigidTransform> trajectory;  // T_{c_k<-ref}
  std::vector<FusedObject> objects;
  std::vector<SingleViewEstimate> single_view;
  PoseGraph graph;
  std::vector<double> ba_cost_history;
  std::optional<double> imu_scale;  // scale applied to the monocular reconstruction
  std::optional<Vector3> gravity;   // estimated, ref frame
  StageTiming timing;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Field on the grid that keeps full-res pixel factor*u' + (factor-1)/2.
inline CorrespondenceField decimate(const CorrespondenceField& f, int factor, const Intrinsics& low) {
  if (factor == 1) return f;
  const int off = (factor - 1) / 2;
  CorrespondenceField out;
  out.source = f.source;
  out.target = f.target;
  out.targets = PixelField(low.width, low.height, Vector2::Zero());
  out.weights.assign(out.targets.size(), Vector2::Zero());
  const double w_scale = static_cast<double>(factor) * factor;
  for (int v = 0; v < low.height; ++v) {
    for (int u = 0; u < low.width; ++u) {
      const size_t src = f.targets.index(factor * u + off, factor * v + off);
      if (!f.targets.valid[src]) continue;
      const size_t dst = out.targets.index(u, v);
      out.targets.values[dst] = (f.targets.values[src].array() - off) / factor;
      out.targets.valid[dst] = 1;
      out.weights[dst] = f.weights[src] * w_scale;
    }
  }
  return out;
}

inline DepthMap decimate(const DepthMap& d, int factor, const Intrinsics& low) {
  if (factor == 1) return d;
  const int off = (factor - 1) / 2;
  DepthMap out(low.width, low.height, 0.0);
  for (int v = 0; v < low.height; ++v)
    for (int u = 0; u < low.width; ++u)
      if (d.is_valid(factor * u + off, factor * v + off)) set_depth(out, u, v, d.at(factor * u + off, factor * v + off));
  return out;
}

inline DepthPrior make_depth_prior(int keyframe, const DepthMap& measured, double relative_sigma) {
  DepthPrior p{keyframe, measured, std::vector<double>(measured.size(), 0.0)};
  for (size_t i = 0; i < measured.size(); ++i)
    if (measured.valid[i]) p.weights[i] = 1.0 / std::pow(relative_sigma * measured.values[i], 2);
  return p;
}

inline double median_depth(const DepthMap& d) {
  std::vector<double> v;
  for (size_t p = 0; p < d.size(); ++p)
    if (d.valid[p]) v.push_back(d.values[p]);
  if (v.empty()) return 1.0;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

/// One correspondence source constraining the depth of a keyframe: the field
/// of pixel targets in another camera and the transform into that camera.
struct DepthTerm {
  RigidTransform t_other;  // keyframe camera -> other camera
  const CorrespondenceField* field = nullptr;
};

/// Per-pixel Gauss-Newton on inverse depth with everything else held fixed.
/// Pixels without a finite solution or with log-depth information below
/// `min_information` come back invalid. `roi` restricts the solved pixels.
inline DepthMap solve_depths(const Intrinsics& k, std::span<const DepthTerm> terms, const DepthMap& init,
                             const DepthPrior* prior, int iterations, const Field<std::uint8_t>* roi = nullptr,
                             double min_information = 1e-3) {
  DepthMap out(k.width, k.height, 0.0);
  struct Obs {
    Vector3 a, b;  // point in the other camera is proportional to a + rho b
    Vector2 target, sw;
  };
  std::vector<Obs> obs;
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const size_t p = init.index(u, v);
      if (!init.valid[p] || (roi && !roi->values[p])) continue;
      const Vector3 ray = k.ray(u, v);
      obs.clear();
      for (const auto& t : terms) {
        if (!t.field->targets.valid[p]) continue;
        const Vector2& w = t.field->weights[p];
        if (w.x() <= 0.0 && w.y() <= 0.0) continue;
        obs.push_back({t.t_other.rotation() * ray, t.t_other.translation(), t.field->targets.values[p],
                       w.cwiseSqrt()});
      }
      double prior_z = 0.0, prior_sw = 0.0;
      if (prior && prior->measured.valid[p] && prior->weights[p] > 0.0) {
        prior_z = prior->measured.values[p];
        prior_sw = std::sqrt(prior->weights[p]);
      }
      if (obs.empty() && prior_sw == 0.0) continue;

      auto cost = [&](double rho) {
        double c = 0.0;
        for (const auto& o : obs) {
          const Vector3 y = o.a + rho * o.b;
          if (!(y.z() > 1e-9)) return std::numeric_limits<double>::infinity();
          c += o.sw.cwiseProduct(o.target - k.project(y)).squaredNorm();
        }
        if (prior_sw > 0.0) c += std::pow(prior_sw * (prior_z - 1.0 / rho), 2);
        return c;
      };
      double rho = 1.0 / init.values[p];
      double c = cost(rho);
      if (!std::isfinite(c)) continue;
      double h = 0.0;
      for (int it = 0; it <= iterations; ++it) {
        double g = 0.0;
        h = 0.0;
        for (const auto& o : obs) {
          const Vector3 y = o.a + rho * o.b;
          const Vector2 r = o.sw.cwiseProduct(o.target - k.project(y));
          const Vector2 j = -o.sw.cwiseProduct(k.projection_jacobian(y) * o.b);
          g += j.dot(r);
          h += j.squaredNorm();
        }
        if (prior_sw > 0.0) {
          const double r = prior_sw * (prior_z - 1.0 / rho);
          const double j = prior_sw / (rho * rho);
          g += j * r;
          h += j * j;
        }
        if (it == iterations || !(h > 0.0)) break;
        double step = -g / h;
        bool moved = false;
        for (int halving = 0; halving < 30; ++halving, step *= 0.5) {
          const double next = rho + step;
          if (!(next > 0.0)) continue;
          const double cn = cost(next);
          if (cn <= c) {
            moved = std::abs(step) > 1e-13 * rho;
            rho = next;
            c = cn;
            break;
          }
        }
        if (!moved) break;
      }
      // h is the information on rho; rho^2 h is the information on log-depth.
      if (std::isfinite(rho) && rho > 0.0 && h * rho * rho > min_information) set_depth(out, u, v, 1.0 / rho);
    }
  }
  return out;
}

/// Motion-only Levenberg-Marquardt for T_{c<-ref} from reference-frame points
/// and their weighted pixel observations, Huber on the whitened residual.
struct TrackingPoint {
  Vector3 x;  // ref frame
  Vector2 target;
  Vector2 sw;
};

inline RigidTransform track_pose(const Intrinsics& k, const std::vector<TrackingPoint>& pts, RigidTransform pose,
                                 int iterations = 20, RobustLoss loss = {LossKind::kHuber, 3.0}) {
  auto cost = [&](const RigidTransform& t) {
    double c = 0.0;
    for (const auto& p : pts) {
      const Vector3 y = t * p.x;
      if (!(y.z() > 1e-6)) continue;
      c += loss.rho(p.sw.cwiseProduct(p.target - k.project(y)).norm());
    }
    return c;
  };
  double c = cost(pose);
  double lambda = 1e-4;
  for (int it = 0; it < iterations; ++it) {
    Matrix6 h = Matrix6::Zero();
    Vector6 g = Vector6::Zero();
    for (const auto& p : pts) {
      const Vector3 y = pose * p.x;
      if (!(y.z() > 1e-6)) continue;
      const Vector2 r = p.sw.cwiseProduct(p.target - k.project(y));
      Eigen::Matrix<double, 3, 6> dy;
      dy << -hat(y), Matrix3::Identity();
      const Eigen::Matrix<double, 2, 6> j = -(p.sw.asDiagonal() * k.projection_jacobian(y) * dy);
      const double w = loss.weight(r.norm());
      h += w * j.transpose() * j;
      g += w * j.transpose() * r;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 10 && !accepted; ++attempt) {
      Matrix6 damped = h;
      damped.diagonal() += lambda * (h.diagonal().array() + 1e-12).matrix();
      const Vector6 dx = -damped.ldlt().solve(g);
      if (!dx.allFinite()) break;
      const RigidTransform next = RigidTransform::exp(dx) * pose;
      const double cn = cost(next);
      if (cn <= c) {
        accepted = true;
        const bool tiny = dx.norm() < 1e-14;
        pose = next;
        c = cn;
        lambda = std::max(lambda * 0.5, 1e-12);
        if (tiny) return pose;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return pose;
}

// ---------------------------------------------------------------------------
// Geometry stage

struct GeometryResult {
  Intrinsics low;  // BA grid
  std::vector<KeyframeState> keyframes;  // poses and low-res depths
  BaResult ba;
  std::optional<double> imu_scale;
  std::optional<Vector3> gravity;
};

inline void validate_for_mode(const Sequence& s, ScaleMode mode) {
  const int n = s.num_keyframes();
  if (n == 0) throw InputError("sequence: no keyframes");
  if (n < 2) throw InputError("sequence: need at least two keyframes");
  s.intrinsics.validate();
  if (s.flows.empty()) throw InputError("sequence: no flow edges");
  if (static_cast<int>(s.detections.size()) != n) throw InputError("sequence: need one detection list per keyframe");
  switch (mode) {
    case ScaleMode::kStereo:
      if (!s.left_to_right || static_cast<int>(s.stereo.size()) != n)
        throw InputError("sequence: stereo mode needs a stereo extrinsic and one stereo field per keyframe");
      break;
    case ScaleMode::kDepth:
      if (static_cast<int>(s.depths.size()) != n) throw InputError("sequence: depth mode needs one depth map per keyframe");
      break;
    case ScaleMode::kImu:
      if (!s.imu || s.imu->samples.size() < 2) throw InputError("sequence: imu mode needs an IMU stream");
      if (n < 4) throw InputError("sequence: imu mode needs at least 4 keyframes");
      break;
    case ScaleMode::kNone:
      break;
  }
}

namespace detail {

struct BaInputs {
  Intrinsics low;
  std::vector<CorrespondenceField> edges;
  std::vector<CorrespondenceField> stereo;
  std::vector<DepthPrior> priors;
};

inline BaInputs ba_inputs(const Sequence& s, const PipelineConfig& cfg) {
  BaInputs in;
  const int f = cfg.ba_decimation;
  in.low = s.intrinsics.downsampled(f);
  for (const auto& e : s.flows) in.edges.push_back(decimate(e, f, in.low));
  if (cfg.scale_mode == ScaleMode::kStereo)
    for (const auto& st : s.stereo) in.stereo.push_back(decimate(st, f, in.low));
  if (cfg.scale_mode == ScaleMode::kDepth)
    for (int k = 0; k < s.num_keyframes(); ++k)
      in.priors.push_back(make_depth_prior(k, decimate(s.depths[k], f, in.low), s.depth_sigma));
  return in;
}

/// BA over keyframes [first, last]; the first one is held fixed.
inline BaResult solve_window(const Sequence& s, const PipelineConfig& cfg, const BaInputs& in,
                             std::vector<KeyframeState>& kfs, int first, int last, int iterations,
                             bool keep_result = false) {
  BaProblem p;
  p.intrinsics = in.low;
  for (int k = first; k <= last; ++k) p.keyframes.push_back(kfs[k]);
  for (const auto& e : in.edges) {
    if (e.source < first || e.source > last || e.target < first || e.target > last) continue;
    CorrespondenceField local = e;
    local.source -= first;
    local.target -= first;
    p.edges.push_back(std::move(local));
  }
  if (cfg.scale_mode == ScaleMode::kStereo) {
    StereoRig rig{*s.left_to_right, {}};
    for (int k = first; k <= last; ++k) {
      CorrespondenceField f = in.stereo[k];
      f.source = f.target = k - first;
      rig.fields.push_back(std::move(f));
    }
    p.stereo = std::move(rig);
  }
  for (int k = first; k <= last && !in.priors.empty(); ++k) {
    DepthPrior pr = in.priors[k];
    pr.keyframe = k - first;
    p.depth_priors.push_back(std::move(pr));
  }
  p.settings = cfg.ba;
  p.settings.max_iterations = iterations;
  if (p.edges.empty()) throw InputError("sequence: keyframes " + std::to_string(first) + ".." +
                                        std::to_string(last) + " share no flow edge");
  BaResult r = solve(p);
  for (int k = first; k <= last; ++k) kfs[k] = r.keyframes[k - first];
  if (!keep_result) r.keyframes.clear();
  return r;
}

/// Depth of keyframe k from its edges to earlier keyframes plus stereo or
/// measured depth, at the BA resolution.
inline DepthMap initial_depth(const Sequence& s, const PipelineConfig& cfg, const BaInputs& in,
                              const std::vector<KeyframeState>& kfs, int k) {
  const Intrinsics& low = in.low;
  std::vector<DepthTerm> terms;
  for (const auto& e : in.edges)
    if (e.source == k && e.target < k) terms.push_back({kfs[e.target].pose * kfs[k].pose.inverse(), &e});
  if (cfg.scale_mode == ScaleMode::kStereo) terms.push_back({*s.left_to_right, &in.stereo[k]});
  const DepthPrior* prior = in.priors.empty() ? nullptr : &in.priors[k];

  // Seed: measured depth where available, else the previous keyframe's median.
  const double seed = k > 0 ? median_depth(kfs[k - 1].depth) : 1.0;
  DepthMap init(low.width, low.height, 0.0);
  for (int v = 0; v < low.height; ++v) {
    for (int u = 0; u < low.width; ++u) {
      const size_t p = init.index(u, v);
      bool used = prior && prior->measured.valid[p];
      for (const auto& e : in.edges) used = used || (e.source == k && e.targets.valid[p]);
      if (!used) continue;
      set_depth(init, u, v, prior && prior->measured.valid[p] ? prior->measured.values[p] : seed);
    }
  }
  if (terms.empty() && !prior) {
    // Monocular first keyframe: unit-depth plane, corrected by the BA.
    return init;
  }
  DepthMap d = solve_depths(low, terms, init, prior, cfg.depth_iterations);
  // Pixels observed only by later keyframes keep the seed so the BA can use them.
  for (size_t p = 0; p < d.size(); ++p)
    if (!d.valid[p] && init.valid[p]) {
      d.values[p] = init.values[p];
      d.valid[p] = 1;
    }
  return d;
}

inline RigidTransform initial_pose(const BaInputs& in, const std::vector<KeyframeState>& kfs, int k) {
  RigidTransform guess = kfs[k - 1].pose;
  if (k >= 2) guess = (kfs[k - 1].pose * kfs[k - 2].pose.inverse()) * kfs[k - 1].pose;
  std::vector<TrackingPoint> pts;
  const Intrinsics& low = in.low;
  for (const auto& e : in.edges) {
    if (e.target != k || e.source >= k) continue;
    const KeyframeState& src = kfs[e.source];
    const RigidTransform ref_from_src = src.pose.inverse();
    for (int v = 0; v < low.height; ++v)
      for (int u = 0; u < low.width; ++u) {
        const size_t p = src.depth.index(u, v);
        if (!src.depth.valid[p] || !e.targets.valid[p]) continue;
        pts.push_back({ref_from_src * (src.depth.values[p] * low.ray(u, v)), e.targets.values[p], e.weights[p].cwiseSqrt()});
      }
  }
  if (pts.size() < 6) {
    log_warning("pipeline: keyframe " + std::to_string(k) + " has no flow to earlier keyframes; using motion prior");
    return guess;
  }
  return track_pose(low, pts, guess);
}

inline Matrix6 scale_covariance(const Matrix6& c, double s) {
  Vector6 d;
  d << 1, 1, 1, s, s, s;
  return d.asDiagonal() * c * d.asDiagonal();
}

}  // namespace detail

/// Scale-aware dense BA: incremental initialisation with a sliding local
/// window, a global BA, then (imu mode) visual-inertial alignment.
inline GeometryResult estimate_geometry(const Sequence& s, const PipelineConfig& cfg) {
  validate_for_mode(s, cfg.scale_mode);
  const detail::BaInputs in = detail::ba_inputs(s, cfg);
  const int n = s.num_keyframes();
  GeometryResult out;
  out.low = in.low;
  std::vector<KeyframeState> kfs(n);
  for (int k = 0; k < n; ++k) kfs[k].timestamp = s.timestamps[k];

  kfs[0].depth = detail::initial_depth(s, cfg, in, kfs, 0);
  for (int k = 1; k < n; ++k) {
    kfs[k].pose = detail::initial_pose(in, kfs, k);
    kfs[k].depth = detail::initial_depth(s, cfg, in, kfs, k);
    if (cfg.ba_window_iterations > 0)
      detail::solve_window(s, cfg, in, kfs, std::max(0, k - cfg.ba_window + 1), k, cfg.ba_window_iterations);
  }
  out.ba = detail::solve_window(s, cfg, in, kfs, 0, n - 1, cfg.ba.max_iterations, true);

  if (cfg.scale_mode == ScaleMode::kImu) {
    const ImuInput& imu = *s.imu;
    std::vector<RigidTransform> poses;
    for (const auto& kf : kfs) poses.push_back(kf.pose);
    std::vector<Preintegration> pre;
    for (int k = 0; k + 1 < n; ++k) pre.push_back(preintegrate_interval(imu.samples, s.timestamps[k], s.timestamps[k + 1], {}));
    const AlignmentResult a = visual_inertial_align(poses, pre, imu.calibration);
    out.imu_scale = a.scale;
    out.gravity = a.gravity;
    for (auto& kf : kfs) {
      kf.pose = RigidTransform(kf.pose.rotation(), kf.pose.translation() * a.scale);
      for (size_t p = 0; p < kf.depth.size(); ++p) kf.depth.values[p] *= a.scale;
    }
    out.ba.pose_covariance = [&] {
      Eigen::MatrixXd c = out.ba.pose_covariance;
      Eigen::VectorXd d = Eigen::VectorXd::Ones(c.rows());
      for (int k = 0; k < n; ++k) d.segment<3>(6 * k + 3).setConstant(a.scale);
      return Eigen::MatrixXd(d.asDiagonal() * c * d.asDiagonal());
    }();
    out.ba.keyframes = kfs;
    if (cfg.inertial_refinement && cfg.ba.max_iterations > 0) {
      BaProblem p;
      p.intrinsics = in.low;
      p.keyframes = kfs;
      p.edges = in.edges;
      InertialFactors f;
      f.calibration = imu.calibration;
      f.calibration.gravity = a.gravity;
      f.noise = imu.noise;
      ImuBias bias;
      bias.gyro = a.gyro_bias;
      for (int k = 0; k + 1 < n; ++k)
        f.preintegrations.push_back(preintegrate_interval(imu.samples, s.timestamps[k], s.timestamps[k + 1], bias));
      for (int k = 0; k < n; ++k) f.states.push_back({a.velocities[k], bias});
      p.inertial = std::move(f);
      p.settings = cfg.ba;
      BaResult r = solve(p);
      kfs = r.keyframes;
      out.ba = std::move(r);
    }
  }
  out.keyframes = std::move(kfs);
  return out;
}

// ---------------------------------------------------------------------------
// Single-view stage

/// Full-resolution depth of keyframe k on the pixels of `roi`, with poses fixed.
inline DepthMap dense_depth(const Sequence& s, const PipelineConfig& cfg, const GeometryResult& geo, int k,
                            const Field<std::uint8_t>& roi) {
  const Intrinsics& K = s.intrinsics;
  std::vector<DepthTerm> terms;
  const auto& kfs = geo.keyframes;
  for (const auto& e : s.flows)
    if (e.source == k) terms.push_back({kfs[e.target].pose * kfs[k].pose.inverse(), &e});
  if (cfg.scale_mode == ScaleMode::kStereo) terms.push_back({*s.left_to_right, &s.stereo[k]});
  std::optional<DepthPrior> prior;
  if (cfg.scale_mode == ScaleMode::kDepth) prior = detail::make_depth_prior(k, s.depths[k], s.depth_sigma);
  const DepthMap init = upsample_depth(kfs[k].depth, cfg.ba_decimation, K.width, K.height);
  return solve_depths(K, terms, init, prior ? &*prior : nullptr, cfg.depth_iterations, &roi);
}

namespace detail {

struct Registration {
  ObjectPoseEstimate estimate;
  Vector3 half_extent = Vector3::Zero();  // max |nocs| over the inliers
};

struct KeyframeRegistrations {
  std::vector<std::optional<Registration>> per_detection;
};

inline std::uint64_t registration_seed(std::uint64_t seed, int k, int d) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
  for (std::uint64_t v : {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(d)}) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h *= 0xbf58476d1ce4e5b9ULL;
  }
  return h;
}

inline KeyframeRegistrations register_keyframe(const Sequence& s, const PipelineConfig& cfg,
                                               const GeometryResult& geo, int k) {
  const auto& dets = s.detections[k];
  KeyframeRegistrations out;
  out.per_detection.resize(dets.size());
  if (dets.empty()) return out;
  const Intrinsics& K = s.intrinsics;
  Field<std::uint8_t> roi(K.width, K.height, 0);
  for (const auto& d : dets)
    for (size_t p = 0; p < roi.size(); ++p) roi.values[p] |= d.mask.values[p];
  const DepthMap depth = dense_depth(s, cfg, geo, k, roi);
  for (size_t di = 0; di < dets.size(); ++di) {
    const Detection& det = dets[di];
    std::vector<Vector3> nocs, xyz;
    for (int v = 0; v < K.height; ++v)
      for (int u = 0; u < K.width; ++u) {
        const size_t p = depth.index(u, v);
        if (!det.mask.values[p] || !det.nocs.valid[p] || !depth.valid[p]) continue;
        nocs.push_back(det.nocs.values[p]);
        xyz.push_back(depth.values[p] * K.ray(u, v));
      }
    const std::string what = "keyframe " + std::to_string(k) + " detection " + std::to_string(di) + " (" + det.category + ")";
    if (static_cast<int>(nocs.size()) < cfg.min_registration_points) {
      log_info("pipeline: " + what + ": too few points with depth, skipped");
      continue;
    }
    PointCorrespondences c;
    c.nocs.resize(static_cast<Eigen::Index>(nocs.size()), 3);
    c.xyz.resize(static_cast<Eigen::Index>(nocs.size()), 3);
    for (size_t i = 0; i < nocs.size(); ++i) {
      c.nocs.row(static_cast<Eigen::Index>(i)) = nocs[i].transpose();
      c.xyz.row(static_cast<Eigen::Index>(i)) = xyz[i].transpose();
    }
    RansacParams params = cfg.ransac;
    params.seed = registration_seed(cfg.seed, k, static_cast<int>(di));
    try {
      ObjectPoseEstimate e = ransac_register(c, params);
      if (e.degenerate) {
        log_warning("pipeline: " + what + ": degenerate registration, skipped");
        continue;
      }
      Vector3 half = Vector3::Zero();
      for (int i : e.inliers) half = half.cwiseMax(nocs[static_cast<size_t>(i)].cwiseAbs());
      out.per_detection[di] = Registration{std::move(e), half};
    } catch (const RegistrationFailure& e) {
      log_warning("pipeline: " + what + ": " + e.what());
    } catch (const DegenerateConfiguration& e) {
      log_warning("pipeline: " + what + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detail

/// Runs the three stages. Registration of keyframes proceeds concurrently;
/// graph updates are staged and applied in keyframe order, so the result is
/// that of the sequential schedule.
inline RunResult run(const Sequence& s, const PipelineConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  RunResult res;
  res.scale_mode = cfg.scale_mode;
  res.timestamps = s.timestamps;

  auto t0 = std::chrono::steady_clock::now();
  const GeometryResult geo = estimate_geometry(s, cfg);
  res.timing.ba = detail::seconds_since(t0);
  res.imu_scale = geo.imu_scale;
  res.gravity = geo.gravity;
  res.ba_cost_history = geo.ba.cost_history;
  for (const auto& kf : geo.keyframes) res.trajectory.push_back(kf.pose);
  const int n = s.num_keyframes();

  t0 = std::chrono::steady_clock::now();
  std::vector<std::future<detail::KeyframeRegistrations>> pending;
  for (int k = 0; k < n; ++k)
    pending.push_back(std::async(std::launch::async, [&, k] { return detail::register_keyframe(s, cfg, geo, k); }));
  TrackManager tracks(cfg.association);
  std::vector<std::vector<int>> track_of(n);
  for (int k = 0; k < n; ++k) track_of[k] = tracks.update(k, s.detections[k]).track_of_detection;

  GraphStagingBuffer staging;
  double graph_time = 0.0;
  std::set<int> objects_in_graph;
  for (int k = 0; k < n; ++k) {
    const detail::KeyframeRegistrations regs = pending[k].get();
    GraphUpdate u;
    u.cameras.push_back({k, res.trajectory[k], k == 0, true});
    if (k > 0)
      u.camera_edges.push_back({k - 1, k, res.trajectory[k] * res.trajectory[k - 1].inverse(),
                                geo.ba.relative_covariance(k - 1, k)});
    for (size_t d = 0; d < regs.per_detection.size(); ++d) {
      if (!regs.per_detection[d]) continue;
      const ObjectPoseEstimate& e = regs.per_detection[d]->estimate;
      const int track = track_of[k][d];
      const std::string& cat = s.detections[k][d].category;
      if (objects_in_graph.insert(track).second) u.objects.push_back({track, cat, SimilarityTransform(), false});
      u.object_edges.push_back({track, k, e.transform, e.covariance});
      res.single_view.push_back({k, static_cast<int>(d), track, cat, e, res.trajectory[k].inverse() * e.transform,
                                 regs.per_detection[d]->half_extent});
    }
    staging.push(u);
    const auto tg = std::chrono::steady_clock::now();
    incremental_update(res.graph, staging.drain(), cfg.graph);
    graph_time += detail::seconds_since(tg);
  }
  res.timing.registration = detail::seconds_since(t0) - graph_time;
  res.timing.graph = graph_time;

  const auto covs = object_covariances(res.graph, cfg.graph.loss);
  for (const auto& o : res.graph.objects()) {
    FusedObject f;
    f.id = o.id;
    f.category = o.category;
    f.pose = o.pose.inverse();
    const Matrix7 ad = f.pose.adjoint();
    f.covariance = ad * covs.at(o.id) * ad.transpose();
    Vector3 half = Vector3::Zero();
    for (const auto& sv : res.single_view) {
      if (sv.track != o.id) continue;
      f.confidence += static_cast<double>(sv.registration.inliers.size());
      half = half.cwiseMax(sv.half_extent);
    }
    f.extents = 2.0 * half;
    res.objects.push_back(std::move(f));
  }
  if (res.objects.empty()) throw ConvergenceError("pipeline: no object could be fused (every registration failed)");
  res.timing.total = detail::seconds_since(t_start);
  return res;
}

inline RunResult run(const PipelineConfig& cfg, const std::filesystem::path& sequence_dir) {
  return run(io::read_sequence(sequence_dir), cfg);
}

// ---------------------------------------------------------------------------
// Evaluation and export

/// Maps estimates into the ground-truth reference frame: identity for metric
/// modes, the trajectory Sim(3) alignment for mode "none".
inline SimilarityTransform evaluation_alignment(ScaleMode mode, const std::vector<RigidTransform>& trajectory,
                                                const Sequence& s) {
  if (mode != ScaleMode::kNone) return {};
  if (!s.has_ground_truth()) throw InputError("eval: mode 'none' needs a ground-truth trajectory for alignment");
  return align_trajectories(trajectory, s.gt_poses);
}

inline EvalFrame evaluation_frame(const std::vector<FusedObject>& objects, const SimilarityTransform& align,
                                  const Sequence& s) {
  EvalFrame f;
  for (const auto& o : objects) f.predictions.push_back({o.category, {align * o.pose, o.extents}, o.confidence});
  for (const auto& g : s.gt_objects) f.ground_truth.push_back({g.category, {g.pose, g.extents}});
  return f;
}

inline MetricsReport evaluate(ScaleMode mode, const std::vector<RigidTransform>& trajectory,
                              const std::vector<FusedObject>& objects, const Sequence& s,
                              const EvalSettings& settings = {}) {
  const SimilarityTransform align = evaluation_alignment(mode, trajectory, s);
  return compute_map({evaluation_frame(objects, align, s)}, settings);
}

inline MetricsReport evaluate(const RunResult& r, const Sequence& s, const EvalSettings& settings = {}) {
  return evaluate(r.scale_mode, r.trajectory, r.objects, s, settings);
}

/// Writes trajectory.txt, objects.json, objects.graph and run.json into `dir`.
inline void export_result(const RunResult& r, const std::filesystem::path& dir, const PipelineConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_trajectory(dir / "trajectory.txt", r.timestamps, r.trajectory);
  io::write_objects(dir / "objects.json", r.objects);
  std::ostringstream graph;
  write_snapshot(graph, r.graph);
  io::detail::write_text(dir / "objects.graph", graph.str());
  nlohmann::json run{{"config", pipeline_config_json(cfg)},
                     {"timing",
                      {{"ba", r.timing.ba},
                       {"registration", r.timing.registration},
                       {"graph", r.timing.graph},
                       {"total", r.timing.total}}},
                     {"ba_cost", r.ba_cost_history}};
  if (r.imu_scale) run["imu_scale"] = *r.imu_scale;
  if (r.gravity) run["gravity"] = io::detail::vec3_json(*r.gravity);
  nlohmann::json views = nlohmann::json::array();
  for (const auto& sv : r.single_view)
    views.push_back({{"keyframe", sv.keyframe},
                     {"detection", sv.detection},
                     {"track", sv.track},
                     {"category", sv.category},
                     {"camera_from_object", io::detail::transform_json(sv.registration.transform)},
                     {"inliers", sv.registration.inliers.size()}});
  run["single_view"] = views;
  io::detail::write_text(dir / "run.json", run.dump(1) + "\n");
}

/// Reads back what export_result wrote: scale mode, trajectory, fused objects
/// and the graph. Single-view estimates and timing are not restored.
inline RunResult import_result(const std::filesystem::path& dir) {
  RunResult r;
  const nlohmann::json run = io::detail::read_json(dir / "run.json");
  if (!run.contains("config")) throw InputError((dir / "run.json").string() + ": missing config");
  r.scale_mode = pipeline_config_from(run["config"]).scale_mode;
  io::Trajectory t = io::read_trajectory(dir / "trajectory.txt");
  r.timestamps = std::move(t.timestamps);
  r.trajectory = std::move(t.poses);
  r.objects = io::read_objects(dir / "objects.json");
  std::istringstream graph(io::detail::read_text(dir / "objects.graph"));
  r.graph = read_snapshot(graph);
  if (run.contains("ba_cost")) r.ba_cost_history = run["ba_cost"].get<std::vector<double>>();
  if (run.contains("imu_scale")) r.imu_scale = run["imu_scale"].get<double>();
  return r;
}

/// One graph edge at the current estimate.
struct EdgeDiagnostic {
  bool object_edge = false;
  int a = 0;  // camera edge: from camera; object edge: object id
  int b = 0;  // camera edge: to camera; object edge: camera id
  double chi2 = 0.0;  // squared Mahalanobis norm of the residual
  double rotation_rad = 0.0;
  double translation = 0.0;
};

inline std::vector<EdgeDiagnostic> edge_diagnostics(const PoseGraph& g) {
  std::vector<EdgeDiagnostic> out;
  for (size_t i = 0; i < g.camera_edges().size(); ++i) {
    const CameraEdge& e = g.camera_edges()[i];
    const Vector6 r = residual_camera(g.camera(e.from).pose, g.camera(e.to).pose, e.measurement).error;
    out.push_back({false, e.from, e.to, r.dot(g.camera_information(i) * r), r.head<3>().norm(), r.tail<3>().norm()});
  }
  for (size_t i = 0; i < g.object_edges().size(); ++i) {
    const ObjectEdge& e = g.object_edges()[i];
    const Vector7 r = residual_object(g.object(e.object).pose, g.camera(e.camera).pose, e.measurement).error;
    out.push_back({true, e.object, e.camera, r.dot(g.object_information(i) * r), r.head<3>().norm(),
                   r.segment<3>(3).norm()});
  }
  return out;
}

inline void write_metrics(const MetricsReport& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream text, csv;
  m.write_text(text);
  m.write_csv(csv);
  io::detail::write_text(dir / "report.txt", text.str());
  io::detail::write_text(dir / "ap_curves.csv", csv.str());
}

}  // namespace mvpose
