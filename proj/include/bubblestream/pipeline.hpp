#pragma once

// End-to-end processing of a stereo recording: pairing, background removal,
// detection, stereo matching, ellipsoid reconstruction, optional
// self-calibration, tracking, counting and the stream report.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bubblestream/bubble_adjustment.hpp"
#include "bubblestream/detection.hpp"
#include "bubblestream/error.hpp"
#include "bubblestream/image.hpp"
#include "bubblestream/matching.hpp"
#include "bubblestream/synchronization.hpp"
#include "bubblestream/tracking.hpp"

namespace bubblestream {

struct HistogramParams {
  double diameter_bin_mm = 0.25;
  double volume_bin_ml = 0.01;
  double velocity_bin_cm_s = 1.0;
};

struct PipelineConfig {
  std::filesystem::path cam1_dir;
  std::filesystem::path cam2_dir;
  int cam1_id = 1;
  int cam2_id = 2;
  std::filesystem::path calibration;
  std::filesystem::path output_dir;

  double counting_row = 400;
  int black_threshold = kBlackThreshold;
  int median_window = 301;
  DetectionParams detection;
  MatchingParams matching;
  bool refine = true;
  int min_contour_points = 8;
  double max_refine_rms_px = 2.0;  // reconstructions fitting worse are dropped
  bool skip_merged = false;        // leave merged outlines out of the reconstruction
  TrackerParams tracker;
  CountingParams counting;         // `row` is taken from counting_row
  bool self_calibration = false;
  int self_calibration_pairs = 500;
  SelfCalibrationOptions self_calibration_options;
  std::optional<double> gate_after_calibration_px;
  HistogramParams histograms;
  int threads = 1;                 // 2 runs the camera streams concurrently
  bool dump_detections = false;
  bool dump_assignments = false;
  bool dump_tracks = false;

  void validate() const;
};

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& c);

/// A stage failed on a given frame (camera frame counter, -1 if not tied to
/// one frame).
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, std::int64_t frame, const std::string& detail);
  const std::string& stage() const { return stage_; }
  std::int64_t frame() const { return frame_; }

 private:
  std::string stage_;
  std::int64_t frame_;
};

struct Histogram {
  double bin_width = 1;
  double origin = 0;  // left edge of the first bin
  std::vector<int> counts;

  int total() const;
};

/// Bins aligned to multiples of the width, spanning the data.
Histogram make_histogram(std::span<const double> values, double bin_width);

struct Summary {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 below two values
  Histogram histogram;
};

struct StreamReport {
  std::int64_t start_time_us = 0;
  std::int64_t end_time_us = 0;
  double duration_s = 0;
  int bubble_count = 0;
  double total_volume_ml = 0;
  double flow_rate_ml_s = 0;
  Summary diameter_mm;
  Summary volume_ml;
  Summary velocity_cm_s;
  std::vector<CountedBubble> bubbles;
  // Recording diagnostics, absent when aggregating a counted-bubble dump.
  int paired_frames = 0;
  int merged_frames = 0;  // pairs with at least one merged outline
  std::vector<DropEvent> drops;
  double clock_offset_us = 0;
  bool recalibrated = false;
};

StreamReport aggregate(std::span<const CountedBubble> counted, double duration_s,
                       const HistogramParams& bins = {});

nlohmann::json to_json(const StreamReport& r);
std::string bubbles_csv(const StreamReport& r);
std::string histogram_csv(const Histogram& h);

/// Writes report.json, bubbles.csv and the three histogram CSVs.
void write_report(const std::filesystem::path& dir, const StreamReport& r);

struct PairResult {
  std::size_t pair = 0;  // index into SyncResult::pairs
  std::int64_t frame = 0;
  double time_s = 0;
  bool merged = false;
  std::size_t detections1 = 0;
  std::size_t detections2 = 0;
  std::vector<BubbleObservation> bubbles;
};

struct PipelineResult {
  SyncResult sync;
  StereoRigd rig;  // after self-calibration if enabled
  std::vector<PairResult> pairs;  // non-black pairs in time order
  std::vector<Track> tracks;
  std::vector<CountedBubble> counted;
  StreamReport report;
  int failed_reconstructions = 0;
};

/// Runs every stage on two frame sources. Throws Error(Unsynchronizable)
/// and StageError.
PipelineResult run_pipeline(const PipelineConfig& config, const FrameSource& cam1, const FrameSource& cam2,
                            const StereoRigd& rig);

/// Opens the configured directories and calibration, runs, and writes the
/// report plus enabled dumps into output_dir.
PipelineResult run_pipeline(const PipelineConfig& config);

/// Matched outlines of the first `pairs` synchronized pairs, for
/// self-calibration from recorded sequences.
std::vector<SilhouettePair> collect_silhouettes(const PipelineConfig& config, const FrameSource& cam1,
                                                const FrameSource& cam2, const StereoRigd& rig, int pairs);

}  // namespace bubblestream
