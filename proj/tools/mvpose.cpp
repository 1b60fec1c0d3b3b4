// mvpose command line: synth, run, eval, inspect.
//
// Exit status: 0 success, 2 invalid input or unreadable/unwritable files,
// 3 numerical failure (nothing fused, degenerate data), 1 anything else.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "mvpose/mvpose.hpp"

namespace fs = std::filesystem;
using namespace mvpose;

namespace {

void print_objects(const std::vector<FusedObject>& objects) {
  std::printf("%-6s %-8s %10s %10s %10s %8s %8s\n", "id", "category", "x", "y", "z", "scale", "inliers");
  for (const auto& o : objects) {
    const Vector3 t = o.pose.translation();
    std::printf("%-6d %-8s %10.4f %10.4f %10.4f %8.4f %8.0f\n", o.id, o.category.c_str(), t.x(), t.y(), t.z(),
                o.pose.scale(), o.confidence);
  }
}

void add_config_flags(CLI::App& cmd, PipelineConfig& c, std::string& mode, std::string& loss) {
  cmd.add_option("--scale-mode", mode, "stereo | imu | depth | none")->check(CLI::IsMember({"stereo", "imu", "depth", "none"}));
  cmd.add_option("--ba-decimation", c.ba_decimation, "BA grid keeps every n-th pixel (odd)");
  cmd.add_option("--ba-window", c.ba_window, "keyframes in the local BA window");
  cmd.add_option("--ba-window-iterations", c.ba_window_iterations);
  cmd.add_option("--ba-iterations", c.ba.max_iterations, "global BA iterations");
  cmd.add_option("--ba-damping", c.ba.initial_damping);
  cmd.add_flag("--inertial-refinement,!--no-inertial-refinement", c.inertial_refinement);
  cmd.add_option("--depth-iterations", c.depth_iterations);
  cmd.add_option("--ransac-threshold", c.ransac.threshold, "inlier distance (m)");
  cmd.add_option("--ransac-iterations", c.ransac.max_iterations);
  cmd.add_option("--ransac-min-inlier-fraction", c.ransac.min_inlier_fraction);
  cmd.add_option("--min-registration-points", c.min_registration_points);
  cmd.add_option("--association-threshold", c.association.iou_threshold, "mask IoU to continue a track");
  cmd.add_option("--association-max-missed", c.association.max_missed);
  cmd.add_option("--loss", loss, "graph loss on object edges")->check(CLI::IsMember({"huber", "squared"}));
  cmd.add_option("--huber-delta", c.graph.loss.delta);
  cmd.add_option("--graph-iterations", c.graph.max_iterations);
  cmd.add_option("--seed", c.seed);
  cmd.add_option("--out", c.output_dir, "output directory");
}

int cmd_synth(const std::string& scene_path, int keyframes, int objects, std::uint64_t seed, const fs::path& out) {
  const SceneSpec spec = scene_path.empty() ? default_scene(keyframes, objects, seed) : io::read_scene_spec(scene_path);
  const Sequence s = SyntheticScene(spec).generate();
  io::write_sequence(out, s);
  std::printf("wrote %d keyframes, %zu flow edges, %zu objects to %s\n", s.num_keyframes(), s.flows.size(),
              s.gt_objects.size(), out.string().c_str());
  return 0;
}

int cmd_run(const fs::path& seq_dir, PipelineConfig cfg, const std::string& config_path) {
  if (!config_path.empty()) cfg = pipeline_config_from(io::detail::read_json(config_path), cfg);
  cfg.validate();
  const Sequence s = io::read_sequence(seq_dir);
  const RunResult r = run(s, cfg);
  std::printf("%s mode: %d keyframes, %zu single-view estimates, %zu objects\n", to_string(r.scale_mode).c_str(),
              s.num_keyframes(), r.single_view.size(), r.objects.size());
  std::printf("time ba %.2fs  registration %.2fs  graph %.2fs  total %.2fs\n", r.timing.ba, r.timing.registration,
              r.timing.graph, r.timing.total);
  if (r.imu_scale) std::printf("imu scale %.6f\n", *r.imu_scale);
  print_objects(r.objects);
  if (!cfg.output_dir.empty()) export_result(r, cfg.output_dir, cfg);
  if (s.has_ground_truth() && !s.gt_objects.empty()) {
    const MetricsReport m = evaluate(r, s);
    m.write_text(std::cout);
    if (!cfg.output_dir.empty()) write_metrics(m, cfg.output_dir);
  }
  return 0;
}

int cmd_eval(const fs::path& seq_dir, const fs::path& result_dir, const std::string& out) {
  const Sequence s = io::read_sequence(seq_dir);
  if (s.gt_objects.empty()) throw InputError(seq_dir.string() + ": no ground-truth objects");
  const RunResult r = import_result(result_dir);
  const MetricsReport m = evaluate(r, s);
  m.write_text(std::cout);
  write_metrics(m, out.empty() ? result_dir : fs::path(out));
  return 0;
}

int cmd_inspect(const fs::path& result_dir, int top) {
  const RunResult r = import_result(result_dir);
  if (!r.ba_cost_history.empty())
    std::printf("ba cost %.6g -> %.6g over %zu evaluations\n", r.ba_cost_history.front(), r.ba_cost_history.back(),
                r.ba_cost_history.size());
  std::vector<EdgeDiagnostic> diag = edge_diagnostics(r.graph);
  double cam = 0.0, obj = 0.0;
  for (const auto& d : diag) (d.object_edge ? obj : cam) += d.chi2;
  std::printf("graph: %zu cameras, %zu objects, %zu camera edges (chi2 %.4g), %zu object edges (chi2 %.4g)\n",
              r.graph.cameras().size(), r.graph.objects().size(), r.graph.camera_edges().size(), cam,
              r.graph.object_edges().size(), obj);
  std::stable_sort(diag.begin(), diag.end(), [](const auto& a, const auto& b) { return a.chi2 > b.chi2; });
  if (top >= 0 && static_cast<size_t>(top) < diag.size()) diag.resize(static_cast<size_t>(top));
  std::printf("%-7s %6s %6s %12s %10s %10s\n", "edge", "a", "b", "chi2", "rot_deg", "trans");
  for (const auto& d : diag)
    std::printf("%-7s %6d %6d %12.4g %10.4f %10.5f\n", d.object_edge ? "object" : "camera", d.a, d.b, d.chi2,
                d.rotation_rad * 180.0 / std::numbers::pi, d.translation);
  print_objects(r.objects);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view object pose fusion on dense SLAM geometry"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "log registration and solver details");

  auto* synth = app.add_subcommand("synth", "generate a synthetic sequence directory");
  std::string scene_path, synth_out;
  int keyframes = 30, objects = 3;
  std::uint64_t synth_seed = 0;
  synth->add_option("--scene", scene_path, "scene JSON; defaults to a generated scene")->check(CLI::ExistingFile);
  synth->add_option("--keyframes", keyframes);
  synth->add_option("--objects", objects);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out, "sequence directory")->required();

  auto* runc = app.add_subcommand("run", "run the pipeline on a sequence directory");
  PipelineConfig cfg;
  std::string mode = to_string(cfg.scale_mode), loss = "huber", config_path, seq_dir;
  runc->add_option("sequence", seq_dir, "sequence directory")->required();
  runc->add_option("--config", config_path, "JSON config; its keys override the flags")->check(CLI::ExistingFile);
  add_config_flags(*runc, cfg, mode, loss);

  auto* evalc = app.add_subcommand("eval", "metrics of an exported run against ground truth");
  std::string eval_seq, eval_result, eval_out;
  evalc->add_option("sequence", eval_seq, "sequence directory")->required();
  evalc->add_option("result", eval_result, "run output directory")->required();
  evalc->add_option("--out", eval_out, "where report.txt and ap_curves.csv go (default: result)");

  auto* inspect = app.add_subcommand("inspect", "residual diagnostics of an exported run");
  std::string inspect_dir;
  int top = 20;
  inspect->add_option("result", inspect_dir, "run output directory")->required();
  inspect->add_option("--top", top, "edges to list, largest chi2 first (-1 for all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  set_log_level(verbose ? LogLevel::kInfo : LogLevel::kWarning);

  try {
    if (*synth) return cmd_synth(scene_path, keyframes, objects, synth_seed, synth_out);
    if (*runc) {
      cfg.scale_mode = parse_scale_mode(mode);
      cfg.graph.loss.kind = loss == "huber" ? LossKind::kHuber : LossKind::kSquared;
      return cmd_run(seq_dir, cfg, config_path);
    }
    if (*evalc) return cmd_eval(eval_seq, eval_result, eval_out);
    if (*inspect) return cmd_inspect(inspect_dir, top);
  } catch (const Error& e) {
    std::cerr << "mvpose: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "mvpose: internal error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
