// Command-line front end: simulate, run, recalibrate, report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bubblestream/calibration_io.hpp"
#include "bubblestream/error.hpp"
#include "bubblestream/pipeline.hpp"
#include "bubblestream/simulator.hpp"

namespace fs = std::filesystem;
using namespace bubblestream;

namespace {

enum Exit { kOk = 0, kConfig = 2, kUnsynchronizable = 3, kStage = 4 };

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, path.string() + ": " + e.what());
  }
}

int simulate(const fs::path& config_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  nlohmann::json j = read_json(config_path);
  if (j.contains("calibration_file") && j["calibration_file"].is_string()) {
    const fs::path p(j["calibration_file"].get<std::string>());
    if (p.is_relative()) j["calibration_file"] = (config_path.parent_path() / p).string();
  }
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)))
    throw Error(ErrorCode::Config, "output directory is not empty: " + out.string());
  SceneConfig scene = scene_config_from_json(j);
  if (seed) scene.seed = *seed;
  const GroundTruth gt = generate(scene, out);
  int visible = 0;
  for (const TruthFrame& f : gt.frames) visible += !f.bubbles.empty();
  std::printf("wrote %zu triggers, %zu bubbles (%d frames with bubbles) to %s\n", gt.frames.size(),
              gt.bubbles.size(), visible, out.string().c_str());
  return kOk;
}

int run(const fs::path& config_path, const std::string& output_override) {
  PipelineConfig config = load_pipeline_config(config_path);
  if (!output_override.empty()) config.output_dir = output_override;
  const PipelineResult r = run_pipeline(config);
  std::printf("%d bubbles, %.6g ml over %.6g s (%.6g ml/s), %d merged-outline frames, %zu drops\n",
              r.report.bubble_count, r.report.total_volume_ml, r.report.duration_s, r.report.flow_rate_ml_s,
              r.report.merged_frames, r.report.drops.size());
  return kOk;
}

int recalibrate(const fs::path& config_path, const fs::path& out, int pairs) {
  PipelineConfig config = load_pipeline_config(config_path);
  if (!fs::is_directory(config.cam1_dir) || !fs::is_directory(config.cam2_dir))
    throw Error(ErrorCode::Config, "input directories not found");
  const CalibrationFile calib = load_calibration(config.calibration);
  std::optional<PgmDirectorySource> s1, s2;
  try {
    s1.emplace(config.cam1_dir, config.cam1_id);
    s2.emplace(config.cam2_dir, config.cam2_id);
  } catch (const Error& e) {
    throw Error(ErrorCode::Unsynchronizable, e.what());
  }
  const auto obs = collect_silhouettes(config, *s1, *s2, calib.rig, pairs > 0 ? pairs : config.self_calibration_pairs);
  SelfCalibrationResult res;
  try {
    res = self_calibrate(calib.rig, obs, config.self_calibration_options);
  } catch (const Error& e) {
    throw StageError("self-calibration", -1, e.what());
  }
  save_calibration(out, {res.rig, true});
  std::printf("refined rig from %zu of %zu bubbles, cost %.6g -> %.6g, written to %s\n", res.used.size(), obs.size(),
              res.summary.initial_cost, res.summary.final_cost, out.string().c_str());
  return kOk;
}

int report(const fs::path& counted_path, double duration, const fs::path& out, const fs::path& config_path) {
  HistogramParams bins;
  if (!config_path.empty()) bins = load_pipeline_config(config_path).histograms;
  std::ifstream in(counted_path);
  if (!in) throw Error(ErrorCode::Config, "cannot open " + counted_path.string());
  std::vector<CountedBubble> counted;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      counted.push_back(counted_bubble_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Config, counted_path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (!(duration > 0)) throw Error(ErrorCode::Config, "--duration must be positive");
  const StreamReport r = aggregate(counted, duration, bins);
  write_report(out, r);
  std::printf("%d bubbles, %.6g ml, %.6g ml/s\n", r.bubble_count, r.total_volume_ml, r.flow_rate_ml_s);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stereo bubble-stream characterization"};
  app.require_subcommand(1);

  fs::path sim_config, sim_out;
  std::optional<std::uint64_t> sim_seed;
  auto* sim = app.add_subcommand("simulate", "Render a synthetic stereo recording with ground truth");
  sim->add_option("-c,--config", sim_config, "scene config (JSON)")->required();
  sim->add_option("-o,--out", sim_out, "output directory (must be empty or absent)")->required();
  sim->add_option("--seed", sim_seed, "override the scene seed");

  fs::path run_config;
  std::string run_out;
  auto* runc = app.add_subcommand("run", "Process a recording into a stream report");
  runc->add_option("-c,--config", run_config, "pipeline config (JSON)")->required();
  runc->add_option("-o,--out", run_out, "override output_dir");

  fs::path rec_config, rec_out;
  int rec_pairs = 0;
  auto* rec = app.add_subcommand("recalibrate", "Refine the relative pose from bubble silhouettes");
  rec->add_option("-c,--config", rec_config, "pipeline config naming inputs and calibration")->required();
  rec->add_option("-o,--out", rec_out, "refined calibration file")->required();
  rec->add_option("--pairs", rec_pairs, "synchronized pairs to use (default from config)");

  fs::path rep_counted, rep_out, rep_config;
  double rep_duration = 0;
  auto* rep = app.add_subcommand("report", "Aggregate a counted-bubble dump into a stream report");
  rep->add_option("-i,--counted", rep_counted, "counted.jsonl")->required();
  rep->add_option("-d,--duration", rep_duration, "observed duration in seconds")->required();
  rep->add_option("-o,--out", rep_out, "output directory")->required();
  rep->add_option("-c,--config", rep_config, "pipeline config for histogram bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*sim) return simulate(sim_config, sim_out, sim_seed);
    if (*runc) return run(run_config, run_out);
    if (*rec) return recalibrate(rec_config, rec_out, rec_pairs);
    if (*rep) return report(rep_counted, rep_duration, rep_out, rep_config);
  } catch (const StageError& e) {
    std::fprintf(stderr, "stage failure: %s\n", e.what());
    return kStage;
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    switch (e.code()) {
      case ErrorCode::Config:
      case ErrorCode::InvalidArgument: return kConfig;
      case ErrorCode::Unsynchronizable: return kUnsynchronizable;
      default: return kStage;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kStage;
  }
  return kConfig;
}
