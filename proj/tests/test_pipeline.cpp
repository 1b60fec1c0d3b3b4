#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvpose/pipeline.hpp"
#include "mvpose/synth.hpp"

namespace mvpose {
namespace {

namespace fs = std::filesystem;

struct ObjectErrors {
  double rotation_rad = 0.0;
  double translation_m = 0.0;
  double scale_rel = 0.0;
};

/// Error of the prediction against the nearest ground-truth object of the same category.
ObjectErrors object_errors(const SimilarityTransform& pred, const std::string& category, const Sequence& s,
                           const SimilarityTransform& align = {}) {
  const SimilarityTransform p = align * pred;
  const ObjectGroundTruth* best = nullptr;
  for (const auto& g : s.gt_objects)
    if (g.category == category &&
        (!best || (g.pose.translation() - p.translation()).norm() < (best->pose.translation() - p.translation()).norm()))
      best = &g;
  EXPECT_NE(best, nullptr);
  if (!best) return {1e9, 1e9, 1e9};
  const PoseError e = pose_error(p, best->pose, category);
  return {e.rotation_deg * std::numbers::pi / 180.0, e.translation_cm / 100.0,
          std::abs(p.scale() / best->pose.scale() - 1.0)};
}

Sequence noise_free_scene(int keyframes, int objects, std::uint64_t seed) {
  return SyntheticScene(default_scene(keyframes, objects, seed)).generate();
}

Sequence noisy_scene(int keyframes, std::uint64_t seed) {
  SceneSpec spec = default_scene(keyframes, 3, seed);
  spec.noise.flow_sigma = 0.3;
  spec.noise.flow_outlier_fraction = 0.05;
  spec.noise.nocs_sigma = 0.02;
  spec.noise.nocs_outlier_fraction = 0.1;
  spec.noise.depth_sigma = 0.01;
  return SyntheticScene(spec).generate();
}

class PipelineFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mvpose_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST(Pipeline, NoiseFreeStereoRecoversObjects) {
  const Sequence s = noise_free_scene(10, 3, 1);
  const RunResult r = run(s, {});
  ASSERT_EQ(r.objects.size(), 3u);
  for (const auto& o : r.objects) {
    const ObjectErrors e = object_errors(o.pose, o.category, s);
    EXPECT_LT(e.rotation_rad, 1e-3) << o.category;
    EXPECT_LT(e.translation_m, 1e-3) << o.category;
    EXPECT_LT(e.scale_rel, 1e-3) << o.category;
  }
  for (int k = 0; k < s.num_keyframes(); ++k) {
    const RigidTransform d = r.trajectory[k] * s.gt_poses[k].inverse();
    EXPECT_LT(d.rotation().angle(), 1e-4);
    EXPECT_LT(d.translation().norm(), 1e-4);
  }
  // Every fused object traces back to at least one single-view estimate.
  for (const auto& o : r.objects)
    EXPECT_TRUE(std::any_of(r.single_view.begin(), r.single_view.end(), [&](const auto& sv) { return sv.track == o.id; }));
}

TEST(Pipeline, ScaleModeAblation) {
  const Sequence s = noise_free_scene(30, 3, 1);
  for (auto mode : {ScaleMode::kStereo, ScaleMode::kDepth, ScaleMode::kImu, ScaleMode::kNone}) {
    SCOPED_TRACE(to_string(mode));
    PipelineConfig cfg;
    cfg.scale_mode = mode;
    const RunResult r = run(s, cfg);
    ASSERT_EQ(r.objects.size(), 3u);
    const SimilarityTransform align = evaluation_alignment(mode, r.trajectory, s);
    const double tol = mode == ScaleMode::kNone ? 1e-3 : 1e-2;
    for (const auto& o : r.objects) {
      const ObjectErrors e = object_errors(o.pose, o.category, s, align);
      EXPECT_LT(e.scale_rel, tol) << o.category;
      if (mode == ScaleMode::kNone) {
        EXPECT_LT(e.rotation_rad, 1e-3) << o.category;
        EXPECT_LT(e.translation_m, 1e-3) << o.category;
      }
    }
    if (mode == ScaleMode::kImu) {
      ASSERT_TRUE(r.imu_scale.has_value());
      EXPECT_NEAR(align_trajectories(r.trajectory, s.gt_poses).scale(), 1.0, 1e-2);
    }
  }
}

TEST(Pipeline, EmptySequenceIsInputError) {
  EXPECT_THROW(run(Sequence{}, {}), InputError);
}

TEST(Pipeline, MissingModeInputsAreInputErrors) {
  const Sequence s = noise_free_scene(6, 2, 3);
  PipelineConfig cfg;
  Sequence no_stereo = s;
  no_stereo.stereo.clear();
  EXPECT_THROW(run(no_stereo, cfg), InputError);
  cfg.scale_mode = ScaleMode::kDepth;
  Sequence no_depth = s;
  no_depth.depths.clear();
  EXPECT_THROW(run(no_depth, cfg), InputError);
  cfg.scale_mode = ScaleMode::kImu;
  Sequence no_imu = s;
  no_imu.imu.reset();
  EXPECT_THROW(run(no_imu, cfg), InputError);
}

TEST(Pipeline, NoDetectionsIsConvergenceError) {
  Sequence s = noise_free_scene(6, 2, 3);
  for (auto& d : s.detections) d.clear();
  EXPECT_THROW(run(s, {}), ConvergenceError);
}

TEST(Pipeline, DeterministicGivenSeed) {
  const Sequence s = noisy_scene(8, 4);
  PipelineConfig cfg;
  cfg.seed = 11;
  const RunResult a = run(s, cfg);
  const RunResult b = run(s, cfg);
  ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
  for (size_t k = 0; k < a.trajectory.size(); ++k)
    EXPECT_EQ(a.trajectory[k].matrix(), b.trajectory[k].matrix());
  ASSERT_EQ(a.objects.size(), b.objects.size());
  for (size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].pose.matrix(), b.objects[i].pose.matrix());
    EXPECT_EQ(a.objects[i].covariance, b.objects[i].covariance);
  }
  ASSERT_EQ(a.single_view.size(), b.single_view.size());
  for (size_t i = 0; i < a.single_view.size(); ++i)
    EXPECT_EQ(a.single_view[i].registration.inliers, b.single_view[i].registration.inliers);
}

TEST(Pipeline, IncrementalGraphMatchesBatch) {
  const Sequence s = noisy_scene(10, 2);
  PipelineConfig cfg;
  const RunResult r = run(s, cfg);
  GraphUpdate all;
  for (int k = 0; k < s.num_keyframes(); ++k) all.cameras.push_back({k, r.trajectory[k], k == 0, true});
  all.camera_edges = r.graph.camera_edges();
  for (const auto& o : r.graph.objects()) all.objects.push_back({o.id, o.category, SimilarityTransform(), false});
  all.object_edges = r.graph.object_edges();
  PoseGraph batch;
  incremental_update(batch, all, cfg.graph);
  const double inc = graph_objective(r.graph, cfg.graph.loss);
  const double bat = graph_objective(batch, cfg.graph.loss);
  EXPECT_NEAR(inc, bat, 1e-6 * std::max(1.0, bat));
}

TEST(Pipeline, FusionImprovesOnSingleViews) {
  int good = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Sequence s = noisy_scene(12, seed);
    PipelineConfig cfg;
    cfg.seed = seed;
    const RunResult r = run(s, cfg);
    for (const auto& o : r.objects) {
      std::vector<double> singles;
      for (const auto& sv : r.single_view)
        if (sv.track == o.id) singles.push_back(object_errors(sv.pose, o.category, s).rotation_rad);
      ASSERT_FALSE(singles.empty());
      std::sort(singles.begin(), singles.end());
      ++total;
      good += object_errors(o.pose, o.category, s).rotation_rad <= singles[singles.size() / 2];
    }
  }
  EXPECT_GE(good, (9 * total + 9) / 10) << good << " of " << total;
}

TEST(Pipeline, EdgeDiagnosticsVanishOnNoiseFreeRun) {
  const Sequence s = noise_free_scene(6, 2, 5);
  const RunResult r = run(s, {});
  const auto diag = edge_diagnostics(r.graph);
  ASSERT_EQ(diag.size(), r.graph.camera_edges().size() + r.graph.object_edges().size());
  for (const auto& d : diag) {
    EXPECT_LT(d.rotation_rad, 1e-6);
    EXPECT_LT(d.translation, 1e-6);
  }
}

TEST(PipelineConfigJson, OverridesAndRoundTrip) {
  PipelineConfig base;
  base.seed = 3;
  const auto j = nlohmann::json::parse(
      R"({"scale_mode": "imu", "ba_decimation": 3, "ransac_threshold": 0.02, "loss": "squared",
          "association_threshold": 0.4, "output_dir": "out"})");
  const PipelineConfig c = pipeline_config_from(j, base);
  EXPECT_EQ(c.scale_mode, ScaleMode::kImu);
  EXPECT_EQ(c.ba_decimation, 3);
  EXPECT_EQ(c.ransac.threshold, 0.02);
  EXPECT_EQ(c.graph.loss.kind, LossKind::kSquared);
  EXPECT_EQ(c.association.iou_threshold, 0.4);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.output_dir, "out");
  EXPECT_EQ(pipeline_config_json(pipeline_config_from(pipeline_config_json(c))), pipeline_config_json(c));
}

TEST(PipelineConfigJson, RejectsBadValues) {
  EXPECT_THROW(pipeline_config_from(nlohmann::json::parse(R"({"scale_mode": "lidar"})")), InputError);
  EXPECT_THROW(pipeline_config_from(nlohmann::json::parse(R"({"ba_decimation": 4})")), InputError);
  EXPECT_THROW(pipeline_config_from(nlohmann::json::parse(R"({"loss": "cauchy"})")), InputError);
  EXPECT_THROW(pipeline_config_from(nlohmann::json::parse(R"({"huber_delta": 0})")), InputError);
}

TEST_F(PipelineFiles, ExportRoundTripReproducesMetrics) {
  const Sequence s = noisy_scene(8, 6);
  PipelineConfig cfg;
  const RunResult r = run(s, cfg);
  export_result(r, dir_, cfg);

  std::ifstream traj(dir_ / "trajectory.txt");
  int lines = 0;
  for (std::string line; std::getline(traj, line);)
    if (!line.empty() && line[0] != '#') ++lines;
  EXPECT_EQ(lines, s.num_keyframes());

  const RunResult back = import_result(dir_);
  EXPECT_EQ(back.scale_mode, r.scale_mode);
  ASSERT_EQ(back.trajectory.size(), r.trajectory.size());
  for (size_t k = 0; k < r.trajectory.size(); ++k) EXPECT_EQ(back.trajectory[k].matrix(), r.trajectory[k].matrix());
  ASSERT_EQ(back.objects.size(), r.objects.size());
  for (size_t i = 0; i < r.objects.size(); ++i) {
    EXPECT_EQ(back.objects[i].pose.matrix(), r.objects[i].pose.matrix());
    EXPECT_EQ(back.objects[i].covariance, r.objects[i].covariance);
    EXPECT_EQ(back.objects[i].extents, r.objects[i].extents);
  }
  EXPECT_EQ(back.graph.object_edges().size(), r.graph.object_edges().size());
  EXPECT_EQ(back.ba_cost_history, r.ba_cost_history);

  const MetricsReport m0 = evaluate(r, s);
  const MetricsReport m1 = evaluate(back, s);
  EXPECT_FALSE(m0.empty);
  EXPECT_EQ(m0.ap, m1.ap);
  std::ostringstream c0, c1;
  m0.write_csv(c0);
  m1.write_csv(c1);
  EXPECT_EQ(c0.str(), c1.str());

  write_metrics(m0, dir_);
  EXPECT_TRUE(fs::exists(dir_ / "report.txt"));
  EXPECT_TRUE(fs::exists(dir_ / "ap_curves.csv"));
}

TEST_F(PipelineFiles, RunsFromSequenceDirectory) {
  io::write_sequence(dir_ / "seq", noise_free_scene(6, 2, 7));
  const Sequence s = io::read_sequence(dir_ / "seq");
  const RunResult r = run(PipelineConfig{}, dir_ / "seq");
  ASSERT_FALSE(r.objects.empty());
  for (const auto& o : r.objects) EXPECT_LT(object_errors(o.pose, o.category, s).rotation_rad, 1e-2);
}

TEST_F(PipelineFiles, ExportToUnwritablePathFails) {
  const Sequence s = noise_free_scene(6, 2, 3);
  const RunResult r = run(s, {});
  std::ofstream(dir_ / "file") << "x";
  EXPECT_THROW(export_result(r, dir_ / "file" / "sub", {}), IoError);
}

}  // namespace
}  // namespace mvpose
