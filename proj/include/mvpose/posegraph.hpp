#pragma once

// Object-level pose graph. Camera nodes X_i = T_{c_i<-ref} (SE(3)), object
// nodes X_k = T_{o_k<-ref} (Sim(3)).
//
//   object edge  e = log(X_k X_i^-1 M),  M = T_{c_i<-o_k}   (from registration)
//   camera edge  e = log(X_i X_j^-1 M),  M = T_{c_j<-c_i}   (from BA)
//
// Both residuals vanish when the loop closes. Measurement covariances live in
// the left-perturbation tangent of M and are transported to the residual
// with the adjoint: information = Ad(M)^T Sigma^-1 Ad(M).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/liegroups.hpp"
#include "mvpose/log.hpp"

namespace mvpose {

using Matrix76 = Eigen::Matrix<double, 7, 6>;

struct CameraNode {
  int id = 0;
  RigidTransform pose;  // T_{c<-ref}
  bool fixed = false;
  bool initialized = true;
};

struct ObjectNode {
  int id = 0;
  std::string category;
  SimilarityTransform pose;  // T_{o<-ref}
  bool initialized = true;
};

struct CameraEdge {
  int from = 0;  // c_i
  int to = 0;    // c_j
  RigidTransform measurement;  // T_{c_j<-c_i}
  Matrix6 covariance = Matrix6::Identity();
};

struct ObjectEdge {
  int object = 0;
  int camera = 0;
  SimilarityTransform measurement;  // T_{c<-o}
  Matrix7 covariance = Matrix7::Identity();
};

enum class LossKind { kSquared, kHuber };

/// Robust kernel on the whitened residual norm r.
struct RobustLoss {
  LossKind kind = LossKind::kHuber;
  double delta = 1.0;

  double rho(double r) const {
    if (kind == LossKind::kSquared || r <= delta) return r * r;
    return 2.0 * delta * r - delta * delta;
  }
  /// IRLS weight: rho'(r) / (2 r).
  double weight(double r) const {
    if (kind == LossKind::kSquared || r <= delta) return 1.0;
    return delta / r;
  }
};

/// Added to camera-edge covariances before inversion.
inline constexpr double kCameraCovarianceRegularizer = 1e-9;

struct ObjectResidual {
  Vector7 error = Vector7::Zero();
  Matrix7 d_object = Matrix7::Zero();  // wrt left perturbation of X_k
  Matrix76 d_camera = Matrix76::Zero();  // wrt left perturbation of X_i
};

struct CameraResidual {
  Vector6 error = Vector6::Zero();
  Matrix6 d_from = Matrix6::Zero();
  Matrix6 d_to = Matrix6::Zero();
};

inline ObjectResidual residual_object(const SimilarityTransform& object, const RigidTransform& camera,
                                      const SimilarityTransform& measurement) {
  const SimilarityTransform oc = object * SimilarityTransform(camera.inverse());
  ObjectResidual r;
  r.error = (oc * measurement).log();
  const Matrix7 jinv = left_jacobian_inverse(r.error);
  r.d_object = jinv;
  r.d_camera = -jinv * oc.adjoint() * se3_to_sim3_tangent();
  return r;
}

inline CameraResidual residual_camera(const RigidTransform& from, const RigidTransform& to,
                                      const RigidTransform& measurement) {
  const RigidTransform ft = from * to.inverse();
  CameraResidual r;
  r.error = (ft * measurement).log();
  const Matrix6 jinv = left_jacobian_inverse(r.error);
  r.d_from = jinv;
  r.d_to = -jinv * ft.adjoint();
  return r;
}

namespace detail {

template <int N>
Eigen::Matrix<double, N, N> symmetric_spd(const Eigen::Matrix<double, N, N>& m, double add_identity) {
  Eigen::Matrix<double, N, N> s = 0.5 * (m + m.transpose());
  s.diagonal().array() += add_identity;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, N, N>> eig(s);
  Eigen::Matrix<double, N, 1> ev = eig.eigenvalues();
  const double floor = 1e-12 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  if (ev.minCoeff() >= floor) return s;
  ev = ev.cwiseMax(floor);
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

/// Information of the residual for a measurement covariance in M's tangent.
template <class G, int N>
Eigen::Matrix<double, N, N> transported_information(const G& m, const Eigen::Matrix<double, N, N>& cov) {
  const Eigen::Matrix<double, N, N> ad = m.adjoint();
  Eigen::Matrix<double, N, N> info = ad.transpose() * cov.inverse() * ad;
  return 0.5 * (info + info.transpose());
}

}  // namespace detail

/// Nodes, edges and their cached information matrices. Not thread-safe; see
/// GraphStagingBuffer for concurrent producers.
class PoseGraph {
 public:
  void add_camera(int id, const RigidTransform& pose, bool fixed = false) {
    add_camera(CameraNode{id, pose, fixed, true});
  }
  void add_camera(const CameraNode& node) {
    if (camera_index_.count(node.id)) throw InputError("pose graph: duplicate camera id " + std::to_string(node.id));
    camera_index_[node.id] = static_cast<int>(cameras_.size());
    cameras_.push_back(node);
  }
  void add_object(int id, const std::string& category, const SimilarityTransform& pose) {
    add_object(ObjectNode{id, category, pose, true});
  }
  void add_object(const ObjectNode& node) {
    if (object_index_.count(node.id)) throw InputError("pose graph: duplicate object id " + std::to_string(node.id));
    object_index_[node.id] = static_cast<int>(objects_.size());
    objects_.push_back(node);
  }
  void add_camera_edge(const CameraEdge& e) {
    if (!camera_index_.count(e.from) || !camera_index_.count(e.to) || e.from == e.to)
      throw InputError("pose graph: camera edge references unknown camera");
    CameraEdge stored = e;
    stored.covariance = 0.5 * (e.covariance + e.covariance.transpose());
    camera_edges_.push_back(stored);
    camera_info_.push_back(detail::transported_information(
        stored.measurement, detail::symmetric_spd<6>(stored.covariance, kCameraCovarianceRegularizer)));
  }
  void add_object_edge(const ObjectEdge& e) {
    if (!object_index_.count(e.object) || !camera_index_.count(e.camera))
      throw InputError("pose graph: object edge references unknown node");
    ObjectEdge stored = e;
    stored.covariance = 0.5 * (e.covariance + e.covariance.transpose());
    object_edges_.push_back(stored);
    object_info_.push_back(
        detail::transported_information(stored.measurement, detail::symmetric_spd<7>(stored.covariance, 0.0)));
  }

  bool has_camera(int id) const { return camera_index_.count(id) > 0; }
  bool has_object(int id) const { return object_index_.count(id) > 0; }
  CameraNode& camera(int id) { return cameras_.at(index_of(camera_index_, id, "camera")); }
  const CameraNode& camera(int id) const { return cameras_.at(index_of(camera_index_, id, "camera")); }
  ObjectNode& object(int id) { return objects_.at(index_of(object_index_, id, "object")); }
  const ObjectNode& object(int id) const { return objects_.at(index_of(object_index_, id, "object")); }

  const std::vector<CameraNode>& cameras() const { return cameras_; }
  const std::vector<ObjectNode>& objects() const { return objects_; }
  std::vector<CameraNode>& cameras() { return cameras_; }
  std::vector<ObjectNode>& objects() { return objects_; }
  const std::vector<CameraEdge>& camera_edges() const { return camera_edges_; }
  const std::vector<ObjectEdge>& object_edges() const { return object_edges_; }
  const Matrix6& camera_information(size_t e) const { return camera_info_[e]; }
  const Matrix7& object_information(size_t e) const { return object_info_[e]; }

  /// Fixes the lowest-id camera when no node is fixed yet.
  void ensure_gauge() {
    for (const auto& c : cameras_)
      if (c.fixed) return;
    if (cameras_.empty()) throw InputError("pose graph: no camera nodes");
    camera(camera_index_.begin()->first).fixed = true;
  }

  /// Initializes nodes flagged uninitialized by composing along edges from
  /// initialized ones (first edge in insertion order wins).
  void initialize_from_edges() {
    bool progress = true;
    while (progress) {
      progress = false;
      for (const auto& e : camera_edges_) {
        CameraNode& a = camera(e.from);
        CameraNode& b = camera(e.to);
        if (a.initialized && !b.initialized) {
          b.pose = e.measurement * a.pose;
          b.initialized = progress = true;
        } else if (!a.initialized && b.initialized) {
          a.pose = e.measurement.inverse() * b.pose;
          a.initialized = progress = true;
        }
      }
      for (const auto& e : object_edges_) {
        ObjectNode& o = object(e.object);
        CameraNode& c = camera(e.camera);
        if (c.initialized && !o.initialized) {
          o.pose = e.measurement.inverse() * SimilarityTransform(c.pose);
          o.initialized = progress = true;
        } else if (!c.initialized && o.initialized) {
          c.pose = (e.measurement * o.pose).rigid();
          c.initialized = progress = true;
        }
      }
    }
  }

  /// Throws DisconnectedGraph naming every node not reachable from a fixed camera.
  void check_connected() const {
    std::set<int> seen_cam, seen_obj;
    std::vector<int> frontier;
    for (const auto& c : cameras_)
      if (c.fixed) {
        seen_cam.insert(c.id);
        frontier.push_back(c.id);
      }
    while (!frontier.empty()) {
      std::vector<int> next;
      for (const auto& e : camera_edges_) {
        const bool a = seen_cam.count(e.from) > 0, b = seen_cam.count(e.to) > 0;
        if (a != b) {
          const int n = a ? e.to : e.from;
          seen_cam.insert(n);
          next.push_back(n);
        }
      }
      for (const auto& e : object_edges_) {
        const bool c = seen_cam.count(e.camera) > 0, o = seen_obj.count(e.object) > 0;
        if (c && !o) seen_obj.insert(e.object);
        if (o && !c) {
          seen_cam.insert(e.camera);
          next.push_back(e.camera);
        }
      }
      frontier = std::move(next);
    }
    std::vector<std::string> orphans;
    for (const auto& c : cameras_)
      if (!seen_cam.count(c.id)) orphans.push_back("camera:" + std::to_string(c.id));
    for (const auto& o : objects_)
      if (!seen_obj.count(o.id)) orphans.push_back("object:" + std::to_string(o.id));
    if (!orphans.empty()) {
      std::string msg = "pose graph: disconnected nodes:";
      for (const auto& s : orphans) msg += " [" + s + "]";
      throw DisconnectedGraph(msg, orphans);
    }
  }

 private:
  static int index_of(const std::map<int, int>& m, int id, const char* what) {
    auto it = m.find(id);
    if (it == m.end()) throw InputError(std::string("pose graph: unknown ") + what + " " + std::to_string(id));
    return it->second;
  }

  std::vector<CameraNode> cameras_;
  std::vector<ObjectNode> objects_;
  std::vector<CameraEdge> camera_edges_;
  std::vector<ObjectEdge> object_edges_;
  std::vector<Matrix6> camera_info_;
  std::vector<Matrix7> object_info_;
  std::map<int, int> camera_index_, object_index_;
};

struct GraphSettings {
  int max_iterations = 50;
  double initial_damping = 1e-4;  // Marquardt: lambda * diag(H)
  RobustLoss loss;                // applied to object edges; camera edges are squared
  double relative_tolerance = 1e-12;
};

struct GraphResult {
  double initial_objective = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> object_edge_weights;  // final IRLS weights
  std::vector<double> objective_history;
};

/// Robust objective sum rho(|e|_Lambda) over object edges plus sum e^T Lambda e
/// over camera edges.
inline double graph_objective(const PoseGraph& g, const RobustLoss& loss) {
  double f = 0.0;
  for (size_t e = 0; e < g.camera_edges().size(); ++e) {
    const auto& ed = g.camera_edges()[e];
    const Vector6 r = residual_camera(g.camera(ed.from).pose, g.camera(ed.to).pose, ed.measurement).error;
    f += r.dot(g.camera_information(e) * r);
  }
  for (size_t e = 0; e < g.object_edges().size(); ++e) {
    const auto& ed = g.object_edges()[e];
    const Vector7 r = (g.object(ed.object).pose * SimilarityTransform(g.camera(ed.camera).pose.inverse()) *
                       ed.measurement)
                          .log();
    f += loss.rho(std::sqrt(std::max(0.0, r.dot(g.object_information(e) * r))));
  }
  return f;
}

namespace detail {

class GraphLayout {
 public:
  explicit GraphLayout(const PoseGraph& g) {
    int off = 0;
    for (const auto& c : g.cameras()) {
      cam_[c.id] = c.fixed ? -1 : off;
      if (!c.fixed) off += 6;
    }
    for (const auto& o : g.objects()) {
      obj_[o.id] = off;
      off += 7;
    }
    size_ = off;
  }
  int camera(int id) const { return cam_.at(id); }
  int object(int id) const { return obj_.at(id); }
  int size() const { return size_; }

 private:
  std::map<int, int> cam_, obj_;
  int size_ = 0;
};

inline void linearize(const PoseGraph& g, const GraphLayout& lay, const RobustLoss& loss, Eigen::MatrixXd& h,
                      Eigen::VectorXd& b, std::vector<double>* weights) {
  h = Eigen::MatrixXd::Zero(lay.size(), lay.size());
  b = Eigen::VectorXd::Zero(lay.size());
  for (size_t e = 0; e < g.camera_edges().size(); ++e) {
    const auto& ed = g.camera_edges()[e];
    const auto r = residual_camera(g.camera(ed.from).pose, g.camera(ed.to).pose, ed.measurement);
    const Matrix6& info = g.camera_information(e);
    const int oi = lay.camera(ed.from), oj = lay.camera(ed.to);
    const Matrix6* jac[2] = {&r.d_from, &r.d_to};
    const int off[2] = {oi, oj};
    for (int a = 0; a < 2; ++a) {
      if (off[a] < 0) continue;
      b.segment<6>(off[a]) -= jac[a]->transpose() * info * r.error;
      for (int c = 0; c < 2; ++c)
        if (off[c] >= 0) h.block<6, 6>(off[a], off[c]) += jac[a]->transpose() * info * *jac[c];
    }
  }
  if (weights) weights->clear();
  for (size_t e = 0; e < g.object_edges().size(); ++e) {
    const auto& ed = g.object_edges()[e];
    const auto r = residual_object(g.object(ed.object).pose, g.camera(ed.camera).pose, ed.measurement);
    const Matrix7& info0 = g.object_information(e);
    const double w = loss.weight(std::sqrt(std::max(0.0, r.error.dot(info0 * r.error))));
    if (weights) weights->push_back(w);
    const Matrix7 info = w * info0;
    const int ok = lay.object(ed.object), oc = lay.camera(ed.camera);
    b.segment<7>(ok) -= r.d_object.transpose() * info * r.error;
    h.block<7, 7>(ok, ok) += r.d_object.transpose() * info * r.d_object;
    if (oc >= 0) {
      b.segment<6>(oc) -= r.d_camera.transpose() * info * r.error;
      h.block<6, 6>(oc, oc) += r.d_camera.transpose() * info * r.d_camera;
      h.block<7, 6>(ok, oc) += r.d_object.transpose() * info * r.d_camera;
      h.block<6, 7>(oc, ok) += r.d_camera.transpose() * info * r.d_object;
    }
  }
}

inline void apply_increment(PoseGraph& g, const GraphLayout& lay, const Eigen::VectorXd& dx) {
  for (auto& c : g.cameras()) {
    const int o = lay.camera(c.id);
    if (o >= 0) c.pose = RigidTransform::exp(dx.segment<6>(o)) * c.pose;
  }
  for (auto& ob : g.objects()) ob.pose = SimilarityTransform::exp(dx.segment<7>(lay.object(ob.id))) * ob.pose;
}

}  // namespace detail

/// Damped Gauss-Newton (Levenberg-Marquardt) with IRLS robust reweighting.
/// The objective is non-increasing over accepted steps.
inline GraphResult optimize(PoseGraph& g, const GraphSettings& settings = {}) {
  if (!(settings.loss.delta > 0.0)) throw InputError("pose graph: Huber delta must be positive");
  g.ensure_gauge();
  g.initialize_from_edges();
  g.check_connected();
  const detail::GraphLayout lay(g);
  GraphResult res;
  double f = graph_objective(g, settings.loss);
  res.initial_objective = f;
  res.objective_history.push_back(f);
  double lambda = settings.initial_damping;
  Eigen::MatrixXd h;
  Eigen::VectorXd b;
  for (int it = 0; it < settings.max_iterations && lay.size() > 0; ++it) {
    detail::linearize(g, lay, settings.loss, h, b, nullptr);
    if (b.cwiseAbs().maxCoeff() < 1e-15) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    double f_new = f;
    Eigen::VectorXd dx;
    for (int attempt = 0; attempt < 15 && !accepted; ++attempt) {
      Eigen::MatrixXd damped = h;
      damped.diagonal() += lambda * (h.diagonal().array() + 1e-12).matrix();
      dx = damped.ldlt().solve(b);
      if (!dx.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      PoseGraph trial = g;
      detail::apply_increment(trial, lay, dx);
      f_new = graph_objective(trial, settings.loss);
      if (std::isfinite(f_new) && f_new <= f) {
        g = std::move(trial);
        accepted = true;
        lambda = std::max(0.5 * lambda, 1e-12);
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) {
      res.converged = true;  // no descent direction left at this precision
      break;
    }
    ++res.iterations;
    const double decrease = f - f_new;
    f = f_new;
    res.objective_history.push_back(f);
    if (decrease <= settings.relative_tolerance * f || dx.cwiseAbs().maxCoeff() < 1e-14 || f < 1e-30) {
      res.converged = true;
      break;
    }
  }
  res.objective = f;
  detail::linearize(g, lay, settings.loss, h, b, &res.object_edge_weights);
  return res;
}

/// Marginal covariance of every object node (left tangent of T_{o<-ref}) from
/// the inverse of the IRLS-weighted Gauss-Newton Hessian at the current state.
inline std::map<int, Matrix7> object_covariances(const PoseGraph& g, const RobustLoss& loss = {}) {
  const detail::GraphLayout lay(g);
  Eigen::MatrixXd h;
  Eigen::VectorXd b;
  detail::linearize(g, lay, loss, h, b, nullptr);
  std::map<int, Matrix7> out;
  if (lay.size() == 0) return out;
  const Eigen::MatrixXd hinv = h.completeOrthogonalDecomposition().pseudoInverse();
  for (const auto& o : g.objects()) {
    const int k = lay.object(o.id);
    const Matrix7 c = hinv.block<7, 7>(k, k);
    out[o.id] = 0.5 * (c + c.transpose());
  }
  return out;
}

/// Nodes and edges produced by the single-view stage for one keyframe.
/// Nodes flagged uninitialized are placed by composing along their edges.
struct GraphUpdate {
  std::vector<CameraNode> cameras;
  std::vector<ObjectNode> objects;
  std::vector<CameraEdge> camera_edges;
  std::vector<ObjectEdge> object_edges;

  bool empty() const {
    return cameras.empty() && objects.empty() && camera_edges.empty() && object_edges.empty();
  }
  void append(const GraphUpdate& o) {
    cameras.insert(cameras.end(), o.cameras.begin(), o.cameras.end());
    objects.insert(objects.end(), o.objects.begin(), o.objects.end());
    camera_edges.insert(camera_edges.end(), o.camera_edges.begin(), o.camera_edges.end());
    object_edges.insert(object_edges.end(), o.object_edges.begin(), o.object_edges.end());
  }
};

inline void merge(PoseGraph& g, const GraphUpdate& u) {
  for (const auto& c : u.cameras) g.add_camera(c);
  for (const auto& o : u.objects) g.add_object(o);
  for (const auto& e : u.camera_edges) g.add_camera_edge(e);
  for (const auto& e : u.object_edges) g.add_object_edge(e);
}

/// Merges an update and re-optimizes warm-started from the current solution.
/// On a disconnected insertion the graph is left unchanged.
inline GraphResult incremental_update(PoseGraph& g, const GraphUpdate& u, const GraphSettings& settings = {}) {
  PoseGraph next = g;
  merge(next, u);
  next.ensure_gauge();
  next.initialize_from_edges();
  next.check_connected();
  GraphResult r = optimize(next, settings);
  g = std::move(next);
  return r;
}

/// Thread-safe queue of graph updates, drained between solves.
class GraphStagingBuffer {
 public:
  void push(const GraphUpdate& u) {
    std::lock_guard lock(mutex_);
    pending_.append(u);
  }
  GraphUpdate drain() {
    std::lock_guard lock(mutex_);
    GraphUpdate out = std::move(pending_);
    pending_ = GraphUpdate{};
    return out;
  }
  bool empty() const {
    std::lock_guard lock(mutex_);
    return pending_.empty();
  }

 private:
  mutable std::mutex mutex_;
  GraphUpdate pending_;
};

// ---------------------------------------------------------------------------
// Snapshot text format, one record per line ('#' starts a comment):
//   CAM <id> <s qw qx qy qz tx ty tz>
//   OBJ <id> <category> <s qw qx qy qz tx ty tz>
//   FIX <camera id>
//   EDGE_CC <from> <to> <measurement> <21 covariance entries, upper triangle row-major>
//   EDGE_OC <object> <camera> <measurement> <28 covariance entries, upper triangle row-major>
// Node poses are T_{c<-ref} / T_{o<-ref}; category names contain no spaces.

namespace detail {
template <int N>
void write_upper(std::ostream& os, const Eigen::Matrix<double, N, N>& m) {
  const auto old = os.precision(17);
  for (int r = 0; r < N; ++r)
    for (int c = r; c < N; ++c) os << ' ' << m(r, c);
  os.precision(old);
}
template <int N>
bool read_upper(std::istream& is, Eigen::Matrix<double, N, N>& m) {
  for (int r = 0; r < N; ++r)
    for (int c = r; c < N; ++c) {
      if (!(is >> m(r, c))) return false;
      m(c, r) = m(r, c);
    }
  return true;
}
}  // namespace detail

inline void write_snapshot(std::ostream& os, const PoseGraph& g) {
  os << "# mvpose pose graph\n";
  for (const auto& c : g.cameras()) os << "CAM " << c.id << ' ' << c.pose << '\n';
  for (const auto& o : g.objects()) os << "OBJ " << o.id << ' ' << o.category << ' ' << o.pose << '\n';
  for (const auto& c : g.cameras())
    if (c.fixed) os << "FIX " << c.id << '\n';
  for (const auto& e : g.camera_edges()) {
    os << "EDGE_CC " << e.from << ' ' << e.to << ' ' << e.measurement;
    detail::write_upper<6>(os, e.covariance);
    os << '\n';
  }
  for (const auto& e : g.object_edges()) {
    os << "EDGE_OC " << e.object << ' ' << e.camera << ' ' << e.measurement;
    detail::write_upper<7>(os, e.covariance);
    os << '\n';
  }
}

inline PoseGraph read_snapshot(std::istream& is) {
  PoseGraph g;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw InputError("pose graph snapshot line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "CAM") {
      int id;
      RigidTransform t;
      if (!(ls >> id) || !read_transform(ls, t)) fail("malformed CAM");
      g.add_camera(id, t);
    } else if (tag == "OBJ") {
      int id;
      std::string cat;
      SimilarityTransform t;
      if (!(ls >> id >> cat) || !read_transform(ls, t)) fail("malformed OBJ");
      g.add_object(id, cat, t);
    } else if (tag == "FIX") {
      int id;
      if (!(ls >> id) || !g.has_camera(id)) fail("FIX references unknown camera");
      g.camera(id).fixed = true;
    } else if (tag == "EDGE_CC") {
      CameraEdge e;
      if (!(ls >> e.from >> e.to) || !read_transform(ls, e.measurement) || !detail::read_upper<6>(ls, e.covariance))
        fail("malformed EDGE_CC");
      g.add_camera_edge(e);
    } else if (tag == "EDGE_OC") {
      ObjectEdge e;
      if (!(ls >> e.object >> e.camera) || !read_transform(ls, e.measurement) ||
          !detail::read_upper<7>(ls, e.covariance))
        fail("malformed EDGE_OC");
      g.add_object_edge(e);
    } else {
      fail("unknown record '" + tag + "'");
    }
    std::string extra;
    if (ls >> extra) fail("trailing fields");
  }
  return g;
}

}  // namespace mvpose
