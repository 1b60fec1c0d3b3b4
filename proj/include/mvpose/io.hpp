#pragma once

// On-disk formats.
//
// Sequence directory (manifest.json at its root):
//   {
//     "format": "mvpose-sequence", "version": 1,
//     "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
//     "keyframes": [{"timestamp", "depth"?, "stereo"?, "detections"?}],
//     "edges": [{"source", "target", "file"}],
//     "stereo": {"left_to_right": T}?,            T_{c'<-c}
//     "depth": {"relative_sigma"}?,
//     "imu": {"file", "body_to_camera": T, "gravity": [3]?, "noise": {...}}?,
//     "ground_truth": {"trajectory", "objects": [{"id", "category", "pose": T, "extents": [3]}]}?
//   }
// Every transform T is the eight-number array [s, qw, qx, qy, qz, tx, ty, tz].
// File names are relative to the directory.
//
// Binary fields are little-endian; a header of a four-byte magic, uint32
// version, int32 width and int32 height precedes row-major float32 pixels.
//   MVDP depth:        1 float per pixel, metres; NaN or <= 0 is invalid
//   MVCF flow:         int32 source, int32 target, then u v wu wv per pixel;
//                      NaN target is invalid
//   MVNC NOCS:         x y z per pixel; NaN is invalid
// Detections of a keyframe: {"frame", "detections": [{"category", "score",
//   "mask": {"width", "height", "counts"}, "nocs": file}]} where counts are
//   row-major run lengths alternating zeros and ones, starting with zeros.
// IMU: CSV with header t,gx,gy,gz,ax,ay,az.
// Trajectory: one "t s qw qx qy qz tx ty tz" line per keyframe holding
//   T_{c<-ref}; '#' starts a comment.

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mvpose/error.hpp"
#include "mvpose/sequence.hpp"
#include "mvpose/synth.hpp"

namespace mvpose::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

class BinaryWriter {
 public:
  explicit BinaryWriter(const fs::path& path) : path_(path), os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot write " + path.string());
  }
  void magic(const char (&m)[5]) { os_.write(m, 4); }
  void u32(std::uint32_t v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), 4);
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void finish() {
    os_.flush();
    if (!os_) throw IoError("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const fs::path& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot read " + path.string());
  }
  void magic(const char (&m)[5]) {
    char got[4];
    read(got, 4);
    if (std::memcmp(got, m, 4) != 0) throw InputError(path_.string() + ": bad magic, expected " + m);
    if (u32() != 1) throw InputError(path_.string() + ": unsupported version");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(reinterpret_cast<char*>(&v), 4);
    return to_little(v);
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f32() { return std::bit_cast<float>(u32()); }
  std::pair<int, int> size() {
    const int w = i32(), h = i32();
    if (w <= 0 || h <= 0 || static_cast<long long>(w) * h > (1LL << 28))
      throw InputError(path_.string() + ": bad image size");
    return {w, h};
  }

 private:
  void read(char* dst, std::streamsize n) {
    if (!is_.read(dst, n)) throw InputError(path_.string() + ": truncated file");
  }
  fs::path path_;
  std::ifstream is_;
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

inline json transform_json(const SimilarityTransform& t) {
  const auto& q = t.rotation().quaternion();
  return json::array({t.scale(), q.w(), q.x(), q.y(), q.z(), t.translation().x(), t.translation().y(),
                      t.translation().z()});
}
inline json transform_json(const RigidTransform& t) { return transform_json(SimilarityTransform(t)); }

inline SimilarityTransform transform_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 8) throw InputError(what + ": transform must be 8 numbers");
  const auto v = j.get<std::vector<double>>();
  if (!(v[0] > 0.0)) throw InputError(what + ": transform scale must be positive");
  const Eigen::Quaterniond q(v[1], v[2], v[3], v[4]);
  if (!(q.norm() > 0.0)) throw InputError(what + ": zero quaternion");
  return {v[0], Rotation(q), Vector3(v[5], v[6], v[7])};
}

inline Vector3 vec3_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw InputError(what + ": expected 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
inline json vec3_json(const Vector3& v) { return json::array({v.x(), v.y(), v.z()}); }

template <class T>
T value_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os.flush()) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

inline std::string numbered(int k, const char* ext) {
  std::ostringstream ss;
  ss << std::setw(6) << std::setfill('0') << k << ext;
  return ss.str();
}

}  // namespace detail

// ---- binary fields ----

inline void write_depth(const fs::path& path, const DepthMap& d) {
  detail::BinaryWriter w(path);
  w.magic("MVDP");
  w.u32(1);
  w.i32(d.width);
  w.i32(d.height);
  for (size_t p = 0; p < d.size(); ++p) w.f32(d.valid[p] ? d.values[p] : detail::kNaN);
  w.finish();
}

inline DepthMap read_depth(const fs::path& path) {
  detail::BinaryReader r(path);
  r.magic("MVDP");
  const auto [w, h] = r.size();
  DepthMap d(w, h);
  for (size_t p = 0; p < d.size(); ++p) {
    const double z = r.f32();
    if (std::isfinite(z) && z > 0.0) {
      d.values[p] = z;
      d.valid[p] = 1;
    }
  }
  return d;
}

inline void write_correspondences(const fs::path& path, const CorrespondenceField& f) {
  detail::BinaryWriter w(path);
  w.magic("MVCF");
  w.u32(1);
  w.i32(f.targets.width);
  w.i32(f.targets.height);
  w.i32(f.source);
  w.i32(f.target);
  for (size_t p = 0; p < f.targets.size(); ++p) {
    const bool ok = f.targets.valid[p];
    w.f32(ok ? f.targets.values[p].x() : detail::kNaN);
    w.f32(ok ? f.targets.values[p].y() : detail::kNaN);
    w.f32(ok ? f.weights[p].x() : 0.0);
    w.f32(ok ? f.weights[p].y() : 0.0);
  }
  w.finish();
}

inline CorrespondenceField read_correspondences(const fs::path& path) {
  detail::BinaryReader r(path);
  r.magic("MVCF");
  const auto [w, h] = r.size();
  CorrespondenceField f;
  f.source = r.i32();
  f.target = r.i32();
  f.targets = PixelField(w, h, Vector2::Zero());
  f.weights.assign(f.targets.size(), Vector2::Zero());
  for (size_t p = 0; p < f.targets.size(); ++p) {
    const double u = r.f32(), v = r.f32(), wu = r.f32(), wv = r.f32();
    if (!std::isfinite(u) || !std::isfinite(v)) continue;
    if (!(wu >= 0.0 && wv >= 0.0)) throw InputError(path.string() + ": negative or NaN confidence");
    f.targets.values[p] = Vector2(u, v);
    f.targets.valid[p] = 1;
    f.weights[p] = Vector2(wu, wv);
  }
  return f;
}

inline void write_nocs(const fs::path& path, const PointField& n) {
  detail::BinaryWriter w(path);
  w.magic("MVNC");
  w.u32(1);
  w.i32(n.width);
  w.i32(n.height);
  for (size_t p = 0; p < n.size(); ++p)
    for (int c = 0; c < 3; ++c) w.f32(n.valid[p] ? n.values[p][c] : detail::kNaN);
  w.finish();
}

inline PointField read_nocs(const fs::path& path) {
  detail::BinaryReader r(path);
  r.magic("MVNC");
  const auto [w, h] = r.size();
  PointField n(w, h, Vector3::Zero());
  for (size_t p = 0; p < n.size(); ++p) {
    Vector3 x;
    for (int c = 0; c < 3; ++c) x[c] = r.f32();
    if (x.allFinite()) {
      n.values[p] = x;
      n.valid[p] = 1;
    }
  }
  return n;
}

// ---- masks and detections ----

inline json encode_mask(const Field<std::uint8_t>& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto v : mask.values) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      counts.push_back(run);
      current = bit;
      run = 0;
    }
    ++run;
  }
  counts.push_back(run);
  return {{"width", mask.width}, {"height", mask.height}, {"counts", counts}};
}

inline Field<std::uint8_t> decode_mask(const json& j) {
  const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
  if (w <= 0 || h <= 0) throw InputError("mask: bad size");
  Field<std::uint8_t> mask(w, h, 0);
  size_t p = 0;
  std::uint8_t bit = 0;
  for (const auto& c : j.at("counts")) {
    const auto n = c.get<std::uint64_t>();
    if (p + n > mask.size()) throw InputError("mask: run lengths exceed the image");
    for (std::uint64_t k = 0; k < n; ++k) mask.values[p + k] = bit;
    p += n;
    bit ^= 1;
  }
  if (p != mask.size()) throw InputError("mask: run lengths do not cover the image");
  mask.valid.assign(mask.size(), 1);
  return mask;
}

/// Writes `<dir>/<stem>.json` plus one NOCS file per detection.
inline void write_detections(const fs::path& dir, const std::string& stem, int frame,
                             const std::vector<Detection>& dets) {
  json list = json::array();
  for (size_t d = 0; d < dets.size(); ++d) {
    const std::string nocs_name = stem + "_" + std::to_string(d) + ".mvnc";
    write_nocs(dir / nocs_name, dets[d].nocs);
    list.push_back({{"category", dets[d].category},
                    {"score", dets[d].score},
                    {"mask", encode_mask(dets[d].mask)},
                    {"nocs", nocs_name}});
  }
  detail::write_text(dir / (stem + ".json"), json{{"frame", frame}, {"detections", list}}.dump(1) + "\n");
}

inline std::vector<Detection> read_detections(const fs::path& path) {
  const json j = detail::read_json(path);
  std::vector<Detection> out;
  try {
    const int frame = j.at("frame").get<int>();
    for (const auto& d : j.at("detections")) {
      Detection det;
      det.frame = frame;
      det.category = d.at("category").get<std::string>();
      det.score = detail::value_or(d, "score", 1.0);
      det.mask = decode_mask(d.at("mask"));
      det.nocs = read_nocs(path.parent_path() / d.at("nocs").get<std::string>());
      det.sanitize();
      out.push_back(std::move(det));
    }
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return out;
}

// ---- IMU ----

inline void write_imu_csv(const fs::path& path, const std::vector<ImuSample>& samples) {
  std::ostringstream os;
  os << "t,gx,gy,gz,ax,ay,az\n" << std::setprecision(17);
  for (const auto& s : samples)
    os << s.t << ',' << s.gyro.x() << ',' << s.gyro.y() << ',' << s.gyro.z() << ',' << s.accel.x() << ','
       << s.accel.y() << ',' << s.accel.z() << '\n';
  detail::write_text(path, os.str());
}

inline std::vector<ImuSample> read_imu_csv(const fs::path& path) {
  std::istringstream is(detail::read_text(path));
  std::string line;
  if (!std::getline(is, line) || line.rfind("t,gx,gy,gz,ax,ay,az", 0) != 0)
    throw InputError(path.string() + ": missing header t,gx,gy,gz,ax,ay,az");
  std::vector<ImuSample> out;
  int number = 1;
  while (std::getline(is, line)) {
    ++number;
    if (line.empty() || line == "\r") continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    ImuSample s;
    if (!(ls >> s.t >> s.gyro.x() >> s.gyro.y() >> s.gyro.z() >> s.accel.x() >> s.accel.y() >> s.accel.z()))
      throw InputError(path.string() + ":" + std::to_string(number) + ": malformed IMU sample");
    if (!out.empty() && !(s.t > out.back().t))
      throw InputError(path.string() + ":" + std::to_string(number) + ": timestamps not increasing");
    out.push_back(s);
  }
  return out;
}

// ---- trajectories ----

inline void write_trajectory(const fs::path& path, const std::vector<double>& timestamps,
                             const std::vector<RigidTransform>& poses) {
  if (timestamps.size() != poses.size()) throw InputError("trajectory: timestamp and pose counts differ");
  std::ostringstream os;
  os << "# t s qw qx qy qz tx ty tz  (T_cam<-ref)\n" << std::setprecision(17);
  for (size_t k = 0; k < poses.size(); ++k) os << timestamps[k] << ' ' << poses[k] << '\n';
  detail::write_text(path, os.str());
}

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<RigidTransform> poses;
};

inline Trajectory read_trajectory(const fs::path& path) {
  std::istringstream is(detail::read_text(path));
  Trajectory out;
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double t;
    RigidTransform pose;
    if (!(ls >> t) || !read_transform(ls, pose))
      throw InputError(path.string() + ":" + std::to_string(number) + ": malformed trajectory line");
    out.timestamps.push_back(t);
    out.poses.push_back(pose);
  }
  return out;
}

// ---- objects ----

inline void write_objects(const fs::path& path, const std::vector<FusedObject>& objects) {
  json list = json::array();
  for (const auto& o : objects) {
    std::vector<double> cov(o.covariance.data(), o.covariance.data() + 49);
    list.push_back({{"id", o.id},
                    {"category", o.category},
                    {"pose", detail::transform_json(o.pose)},
                    {"covariance", cov},
                    {"extents", detail::vec3_json(o.extents)},
                    {"confidence", o.confidence}});
  }
  detail::write_text(path, json{{"objects", list}}.dump(1) + "\n");
}

inline std::vector<FusedObject> read_objects(const fs::path& path) {
  const json j = detail::read_json(path);
  std::vector<FusedObject> out;
  try {
    for (const auto& o : j.at("objects")) {
      FusedObject f;
      f.id = o.at("id").get<int>();
      f.category = o.at("category").get<std::string>();
      f.pose = detail::transform_from(o.at("pose"), path.string());
      const auto cov = detail::value_or(o, "covariance", std::vector<double>(49, 0.0));
      if (cov.size() != 49) throw InputError(path.string() + ": covariance must have 49 entries");
      f.covariance = Eigen::Map<const Matrix7>(cov.data());
      f.extents = detail::vec3_from(o.at("extents"), path.string());
      f.confidence = detail::value_or(o, "confidence", 0.0);
      out.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return out;
}

inline json ground_truth_objects_json(const std::vector<ObjectGroundTruth>& objects) {
  json list = json::array();
  for (const auto& o : objects)
    list.push_back({{"id", o.id},
                    {"category", o.category},
                    {"pose", detail::transform_json(o.pose)},
                    {"extents", detail::vec3_json(o.extents)}});
  return list;
}

inline std::vector<ObjectGroundTruth> ground_truth_objects_from(const json& list, const std::string& what) {
  std::vector<ObjectGroundTruth> out;
  for (const auto& o : list)
    out.push_back({o.at("id").get<int>(), o.at("category").get<std::string>(),
                   detail::transform_from(o.at("pose"), what), detail::vec3_from(o.at("extents"), what)});
  return out;
}

// ---- sequence directory ----

inline void write_sequence(const fs::path& dir, const Sequence& s) {
  const int n = s.num_keyframes();
  fs::create_directories(dir / "flow");
  fs::create_directories(dir / "detections");
  if (!s.depths.empty()) fs::create_directories(dir / "depth");
  if (!s.stereo.empty()) fs::create_directories(dir / "stereo");

  const Intrinsics& K = s.intrinsics;
  json m;
  m["format"] = "mvpose-sequence";
  m["version"] = 1;
  m["intrinsics"] = {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
  json keyframes = json::array();
  for (int k = 0; k < n; ++k) {
    json kf{{"timestamp", s.timestamps[k]}};
    if (k < static_cast<int>(s.depths.size())) {
      kf["depth"] = "depth/" + detail::numbered(k, ".mvdp");
      write_depth(dir / kf["depth"].get<std::string>(), s.depths[k]);
    }
    if (k < static_cast<int>(s.stereo.size())) {
      kf["stereo"] = "stereo/" + detail::numbered(k, ".mvcf");
      write_correspondences(dir / kf["stereo"].get<std::string>(), s.stereo[k]);
    }
    if (k < static_cast<int>(s.detections.size())) {
      write_detections(dir / "detections", detail::numbered(k, ""), k, s.detections[k]);
      kf["detections"] = "detections/" + detail::numbered(k, ".json");
    }
    keyframes.push_back(kf);
  }
  m["keyframes"] = keyframes;
  json edges = json::array();
  for (const auto& f : s.flows) {
    const std::string name = "flow/" + detail::numbered(f.source, "_") + detail::numbered(f.target, ".mvcf");
    write_correspondences(dir / name, f);
    edges.push_back({{"source", f.source}, {"target", f.target}, {"file", name}});
  }
  m["edges"] = edges;
  if (s.left_to_right) m["stereo"] = {{"left_to_right", detail::transform_json(*s.left_to_right)}};
  if (!s.depths.empty()) m["depth"] = {{"relative_sigma", s.depth_sigma}};
  if (s.imu) {
    write_imu_csv(dir / "imu.csv", s.imu->samples);
    const ImuNoise& nz = s.imu->noise;
    m["imu"] = {{"file", "imu.csv"},
                {"body_to_camera", detail::transform_json(s.imu->calibration.body_to_camera)},
                {"gravity", detail::vec3_json(s.imu->calibration.gravity)},
                {"noise",
                 {{"position_sigma", nz.position_sigma},
                  {"velocity_sigma", nz.velocity_sigma},
                  {"rotation_sigma", nz.rotation_sigma},
                  {"accel_bias_walk", nz.accel_bias_walk},
                  {"gyro_bias_walk", nz.gyro_bias_walk}}}};
  }
  if (s.has_ground_truth()) {
    fs::create_directories(dir / "ground_truth");
    write_trajectory(dir / "ground_truth" / "trajectory.txt", s.timestamps, s.gt_poses);
    m["ground_truth"] = {{"trajectory", "ground_truth/trajectory.txt"},
                         {"objects", ground_truth_objects_json(s.gt_objects)}};
  }
  detail::write_text(dir / "manifest.json", m.dump(1) + "\n");
}

inline Sequence read_sequence(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) throw InputError(dir.string() + ": no manifest.json");
  const json m = detail::read_json(manifest);
  const std::string where = manifest.string();
  Sequence s;
  try {
    if (m.value("format", "") != "mvpose-sequence") throw InputError(where + ": not an mvpose sequence manifest");
    if (m.value("version", 0) != 1) throw InputError(where + ": unsupported version");
    const json& ki = m.at("intrinsics");
    s.intrinsics = {ki.at("fx").get<double>(), ki.at("fy").get<double>(), ki.at("cx").get<double>(),
                    ki.at("cy").get<double>(), ki.at("width").get<int>(),  ki.at("height").get<int>()};
    s.intrinsics.validate();
    const int W = s.intrinsics.width, H = s.intrinsics.height;
    auto check_size = [&](int w, int h, const std::string& file) {
      if (w != W || h != H) throw InputError(file + ": size differs from the intrinsics");
    };

    const json& kfs = m.at("keyframes");
    const int n = static_cast<int>(kfs.size());
    const bool has_depth = n > 0 && kfs[0].contains("depth");
    const bool has_stereo = n > 0 && kfs[0].contains("stereo");
    for (int k = 0; k < n; ++k) {
      const json& kf = kfs[k];
      s.timestamps.push_back(kf.at("timestamp").get<double>());
      if (k > 0 && !(s.timestamps[k] > s.timestamps[k - 1])) throw InputError(where + ": timestamps not increasing");
      if (kf.contains("depth") != has_depth || kf.contains("stereo") != has_stereo)
        throw InputError(where + ": keyframe " + std::to_string(k) + " lacks depth or stereo present elsewhere");
      if (has_depth) {
        const std::string file = kf.at("depth").get<std::string>();
        s.depths.push_back(read_depth(dir / file));
        check_size(s.depths.back().width, s.depths.back().height, file);
      }
      if (has_stereo) {
        const std::string file = kf.at("stereo").get<std::string>();
        s.stereo.push_back(read_correspondences(dir / file));
        check_size(s.stereo.back().targets.width, s.stereo.back().targets.height, file);
        if (s.stereo.back().source != k) throw InputError(file + ": stereo field source is not its keyframe");
        s.stereo.back().source = s.stereo.back().target = k;
      }
      s.detections.push_back(kf.contains("detections")
                                 ? read_detections(dir / kf.at("detections").get<std::string>())
                                 : std::vector<Detection>{});
      for (auto& d : s.detections.back()) {
        check_size(d.mask.width, d.mask.height, "detections of keyframe " + std::to_string(k));
        d.frame = k;
      }
    }
    for (const auto& e : m.at("edges")) {
      const std::string file = e.at("file").get<std::string>();
      CorrespondenceField f = read_correspondences(dir / file);
      check_size(f.targets.width, f.targets.height, file);
      if (f.source != e.at("source").get<int>() || f.target != e.at("target").get<int>())
        throw InputError(file + ": edge endpoints disagree with the manifest");
      if (f.source < 0 || f.source >= n || f.target < 0 || f.target >= n || f.source == f.target)
        throw InputError(file + ": edge endpoints out of range");
      s.flows.push_back(std::move(f));
    }
    if (m.contains("stereo")) s.left_to_right = detail::transform_from(m["stereo"].at("left_to_right"), where).rigid();
    if (has_stereo && !s.left_to_right) throw InputError(where + ": stereo fields without a left_to_right extrinsic");
    if (m.contains("depth")) s.depth_sigma = m["depth"].value("relative_sigma", s.depth_sigma);
    if (m.contains("imu")) {
      const json& ji = m["imu"];
      ImuInput imu;
      imu.samples = read_imu_csv(dir / ji.at("file").get<std::string>());
      imu.calibration.body_to_camera = detail::transform_from(ji.at("body_to_camera"), where).rigid();
      if (ji.contains("gravity")) imu.calibration.gravity = detail::vec3_from(ji["gravity"], where);
      if (ji.contains("noise")) {
        const json& nz = ji["noise"];
        imu.noise.position_sigma = nz.value("position_sigma", imu.noise.position_sigma);
        imu.noise.velocity_sigma = nz.value("velocity_sigma", imu.noise.velocity_sigma);
        imu.noise.rotation_sigma = nz.value("rotation_sigma", imu.noise.rotation_sigma);
        imu.noise.accel_bias_walk = nz.value("accel_bias_walk", imu.noise.accel_bias_walk);
        imu.noise.gyro_bias_walk = nz.value("gyro_bias_walk", imu.noise.gyro_bias_walk);
      }
      s.imu = std::move(imu);
    }
    if (m.contains("ground_truth")) {
      const json& g = m["ground_truth"];
      const Trajectory t = read_trajectory(dir / g.at("trajectory").get<std::string>());
      if (static_cast<int>(t.poses.size()) != n) throw InputError(where + ": ground-truth trajectory length differs");
      s.gt_poses = t.poses;
      s.gt_objects = ground_truth_objects_from(g.value("objects", json::array()), where);
    }
  } catch (const json::exception& e) {
    throw InputError(where + ": " + e.what());
  }
  return s;
}

// ---- scene specification (human-editable JSON) ----

inline json scene_spec_json(const SceneSpec& s) {
  const Intrinsics& K = s.intrinsics;
  json objects = json::array();
  for (const auto& o : s.objects) objects.push_back({{"category", o.category}, {"pose", detail::transform_json(o.pose)}});
  const TrajectorySpec& t = s.trajectory;
  const NoiseSpec& nz = s.noise;
  json j{{"intrinsics",
          {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}}},
         {"objects", objects},
         {"trajectory",
          {{"center", detail::vec3_json(t.center)},
           {"radius", t.radius},
           {"height", t.height},
           {"bob_amplitude", t.bob_amplitude},
           {"bob_frequency", t.bob_frequency},
           {"start_angle", t.start_angle},
           {"angular_rate", t.angular_rate},
           {"angular_accel", t.angular_accel},
           {"tilt", t.tilt}}},
         {"keyframes", s.keyframes},
         {"keyframe_interval", s.keyframe_interval},
         {"imu_rate", s.imu_rate},
         {"body_to_camera", detail::transform_json(s.body_to_camera)},
         {"edge_span", s.edge_span},
         {"min_object_pixels", s.min_object_pixels},
         {"noise",
          {{"flow_sigma", nz.flow_sigma},
           {"flow_outlier_fraction", nz.flow_outlier_fraction},
           {"outlier_weight", nz.outlier_weight},
           {"min_flow_sigma", nz.min_flow_sigma},
           {"depth_sigma", nz.depth_sigma},
           {"nocs_sigma", nz.nocs_sigma},
           {"nocs_outlier_fraction", nz.nocs_outlier_fraction},
           {"gyro_noise_density", nz.gyro_noise_density},
           {"accel_noise_density", nz.accel_noise_density},
           {"gyro_bias_walk", nz.gyro_bias_walk},
           {"accel_bias_walk", nz.accel_bias_walk},
           {"gyro_bias", detail::vec3_json(nz.gyro_bias)},
           {"accel_bias", detail::vec3_json(nz.accel_bias)}}},
         {"seed", s.seed}};
  j["stereo_baseline"] = s.stereo_baseline ? json(*s.stereo_baseline) : json(nullptr);
  return j;
}

/// Missing keys keep the defaults of SceneSpec.
inline SceneSpec scene_spec_from(const json& j, const std::string& where = "scene") {
  SceneSpec s;
  try {
    if (j.contains("intrinsics")) {
      const json& k = j["intrinsics"];
      Intrinsics& K = s.intrinsics;
      K = {k.value("fx", K.fx), k.value("fy", K.fy), k.value("cx", K.cx),
           k.value("cy", K.cy), k.value("width", K.width), k.value("height", K.height)};
    }
    if (j.contains("stereo_baseline"))
      s.stereo_baseline = j["stereo_baseline"].is_null() ? std::nullopt : std::optional<double>(j["stereo_baseline"].get<double>());
    if (j.contains("objects")) {
      for (const auto& o : j["objects"]) {
        ObjectSpec spec;
        spec.category = o.at("category").get<std::string>();
        if (o.contains("pose")) {
          spec.pose = detail::transform_from(o["pose"], where);
        } else {
          spec.pose = place_on_ground(spec.category, o.value("scale", 0.15), o.value("yaw", 0.0), o.value("x", 0.0),
                                      o.value("y", 0.0));
        }
        s.objects.push_back(spec);
      }
    }
    if (j.contains("trajectory")) {
      const json& t = j["trajectory"];
      TrajectorySpec& T = s.trajectory;
      if (t.contains("center")) T.center = detail::vec3_from(t["center"], where);
      T.radius = t.value("radius", T.radius);
      T.height = t.value("height", T.height);
      T.bob_amplitude = t.value("bob_amplitude", T.bob_amplitude);
      T.bob_frequency = t.value("bob_frequency", T.bob_frequency);
      T.start_angle = t.value("start_angle", T.start_angle);
      T.angular_rate = t.value("angular_rate", T.angular_rate);
      T.angular_accel = t.value("angular_accel", T.angular_accel);
      T.tilt = t.value("tilt", T.tilt);
    }
    s.keyframes = j.value("keyframes", s.keyframes);
    s.keyframe_interval = j.value("keyframe_interval", s.keyframe_interval);
    s.imu_rate = j.value("imu_rate", s.imu_rate);
    if (j.contains("body_to_camera")) s.body_to_camera = detail::transform_from(j["body_to_camera"], where).rigid();
    s.edge_span = j.value("edge_span", s.edge_span);
    s.min_object_pixels = j.value("min_object_pixels", s.min_object_pixels);
    if (j.contains("noise")) {
      const json& n = j["noise"];
      NoiseSpec& N = s.noise;
      N.flow_sigma = n.value("flow_sigma", N.flow_sigma);
      N.flow_outlier_fraction = n.value("flow_outlier_fraction", N.flow_outlier_fraction);
      N.outlier_weight = n.value("outlier_weight", N.outlier_weight);
      N.min_flow_sigma = n.value("min_flow_sigma", N.min_flow_sigma);
      N.depth_sigma = n.value("depth_sigma", N.depth_sigma);
      N.nocs_sigma = n.value("nocs_sigma", N.nocs_sigma);
      N.nocs_outlier_fraction = n.value("nocs_outlier_fraction", N.nocs_outlier_fraction);
      N.gyro_noise_density = n.value("gyro_noise_density", N.gyro_noise_density);
      N.accel_noise_density = n.value("accel_noise_density", N.accel_noise_density);
      N.gyro_bias_walk = n.value("gyro_bias_walk", N.gyro_bias_walk);
      N.accel_bias_walk = n.value("accel_bias_walk", N.accel_bias_walk);
      if (n.contains("gyro_bias")) N.gyro_bias = detail::vec3_from(n["gyro_bias"], where);
      if (n.contains("accel_bias")) N.accel_bias = detail::vec3_from(n["accel_bias"], where);
    }
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw InputError(where + ": " + e.what());
  }
  s.validate();
  return s;
}

inline void write_scene_spec(const fs::path& path, const SceneSpec& s) {
  detail::write_text(path, scene_spec_json(s).dump(2) + "\n");
}

inline SceneSpec read_scene_spec(const fs::path& path) { return scene_spec_from(detail::read_json(path), path.string()); }

}  // namespace mvpose::io
