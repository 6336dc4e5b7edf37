#include "bubblestream/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <initializer_list>
#include <set>

#include "bubblestream/background.hpp"
#include "bubblestream/calibration_io.hpp"

namespace bubblestream {

using nlohmann::json;
namespace fs = std::filesystem;

StageError::StageError(std::string stage, std::int64_t frame, const std::string& detail)
    : std::runtime_error(stage + (frame >= 0 ? " (frame " + std::to_string(frame) + ")" : std::string()) + ": " +
                         detail),
      stage_(std::move(stage)),
      frame_(frame) {}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::Config, what);
}

void check_keys(const json& j, const char* section, std::initializer_list<const char*> keys) {
  require(j.is_object(), std::string(section) + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    require(known, std::string("unknown key '") + item.key() + "' in " + section);
  }
}

template <typename T>
void read(const json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

void PipelineConfig::validate() const {
  require(median_window >= 1 && median_window % 2 == 1, "background.window must be odd and positive");
  require(counting_row > 0, "counting_row must be positive");
  require(black_threshold >= 1 && black_threshold <= 256, "black_threshold must lie in [1, 256]");
  require(detection.gaussian_sigma >= 0, "detection.gaussian_sigma must be >= 0");
  require(detection.high_threshold >= 0 && detection.high_floor >= 0, "detection thresholds must be >= 0");
  require(detection.low_ratio > 0 && detection.low_ratio <= 1, "detection.low_ratio must lie in (0, 1]");
  require(detection.min_contour_px >= 0 && detection.merge_gap_px >= 0 && detection.hull_band_px >= 0,
          "detection lengths must be >= 0");
  require(matching.gate_px > 0, "matching.gate_px must be positive");
  require(matching.area_weight >= 0, "matching.area_weight must be >= 0");
  require(min_contour_points >= 5, "reconstruction.min_contour_points must be >= 5");
  require(max_refine_rms_px > 0, "reconstruction.max_rms_px must be positive");
  require(tracker.iou_min >= 0 && tracker.iou_min <= 1, "tracking.iou_min must lie in [0, 1]");
  require(tracker.downward_slack_px >= 0 && tracker.sideward_gate_px > 0, "tracking gates must be positive");
  require(tracker.max_age >= 0 && tracker.min_hits >= 1, "tracking.max_age >= 0 and min_hits >= 1 required");
  require(tracker.kalman.initial_velocity_px.allFinite(), "tracking.kalman.initial_velocity_px must be finite");
  require(counting.velocity_half_window >= 1, "counting.velocity_half_window must be >= 1");
  require(counting.up.norm() > 0, "counting.up must be non-zero");
  require(self_calibration_pairs >= 1, "self_calibration.pairs must be >= 1");
  require(!gate_after_calibration_px || *gate_after_calibration_px > 0, "self_calibration.gate_after_px must be positive");
  require(histograms.diameter_bin_mm > 0 && histograms.volume_bin_ml > 0 && histograms.velocity_bin_cm_s > 0,
          "histogram bins must be positive");
  require(threads >= 1, "threads must be >= 1");
}

PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base) {
  PipelineConfig c;
  try {
    check_keys(j, "pipeline config",
               {"cam1_dir", "cam2_dir", "cam1_id", "cam2_id", "calibration", "output_dir", "counting_row",
                "black_threshold", "background", "detection", "matching", "reconstruction", "tracking", "counting",
                "self_calibration", "histograms", "threads", "dumps"});
    if (j.contains("cam1_dir")) c.cam1_dir = resolve(base, j.at("cam1_dir").get<std::string>());
    if (j.contains("cam2_dir")) c.cam2_dir = resolve(base, j.at("cam2_dir").get<std::string>());
    if (j.contains("calibration")) c.calibration = resolve(base, j.at("calibration").get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve(base, j.at("output_dir").get<std::string>());
    read(j, "cam1_id", c.cam1_id);
    read(j, "cam2_id", c.cam2_id);
    read(j, "counting_row", c.counting_row);
    read(j, "black_threshold", c.black_threshold);
    read(j, "threads", c.threads);
    if (j.contains("background")) {
      const json& b = j.at("background");
      check_keys(b, "background", {"window"});
      read(b, "window", c.median_window);
    }
    if (j.contains("detection")) {
      const json& d = j.at("detection");
      check_keys(d, "detection", {"gaussian_sigma", "high_threshold", "high_floor", "low_ratio", "min_contour_px",
                                  "merge_gap_px", "hull_band_px", "merged_rms_px", "border_margin_px"});
      read(d, "gaussian_sigma", c.detection.gaussian_sigma);
      read(d, "high_threshold", c.detection.high_threshold);
      read(d, "high_floor", c.detection.high_floor);
      read(d, "low_ratio", c.detection.low_ratio);
      read(d, "min_contour_px", c.detection.min_contour_px);
      read(d, "merge_gap_px", c.detection.merge_gap_px);
      read(d, "hull_band_px", c.detection.hull_band_px);
      read(d, "merged_rms_px", c.detection.merged_rms_px);
      read(d, "border_margin_px", c.detection.border_margin_px);
    }
    if (j.contains("matching")) {
      const json& m = j.at("matching");
      check_keys(m, "matching", {"gate_px", "area_weight"});
      read(m, "gate_px", c.matching.gate_px);
      read(m, "area_weight", c.matching.area_weight);
    }
    if (j.contains("reconstruction")) {
      const json& r = j.at("reconstruction");
      check_keys(r, "reconstruction", {"refine", "min_contour_points", "max_rms_px", "skip_merged"});
      read(r, "refine", c.refine);
      read(r, "min_contour_points", c.min_contour_points);
      read(r, "max_rms_px", c.max_refine_rms_px);
      read(r, "skip_merged", c.skip_merged);
    }
    if (j.contains("tracking")) {
      const json& t = j.at("tracking");
      check_keys(t, "tracking",
                 {"iou_min", "downward_slack_px", "sideward_gate_px", "max_age", "min_hits", "kalman"});
      read(t, "iou_min", c.tracker.iou_min);
      read(t, "downward_slack_px", c.tracker.downward_slack_px);
      read(t, "sideward_gate_px", c.tracker.sideward_gate_px);
      read(t, "max_age", c.tracker.max_age);
      read(t, "min_hits", c.tracker.min_hits);
      if (t.contains("kalman")) {
        const json& k = t.at("kalman");
        check_keys(k, "tracking.kalman",
                   {"q_position", "q_scale_rel", "q_velocity", "q_scale_rate_rel", "r_position", "r_scale_rel",
                    "r_aspect_rel", "p0_velocity", "initial_velocity_px"});
        KalmanParams& p = c.tracker.kalman;
        read(k, "q_position", p.q_position);
        read(k, "q_scale_rel", p.q_scale_rel);
        read(k, "q_velocity", p.q_velocity);
        read(k, "q_scale_rate_rel", p.q_scale_rate_rel);
        read(k, "r_position", p.r_position);
        read(k, "r_scale_rel", p.r_scale_rel);
        read(k, "r_aspect_rel", p.r_aspect_rel);
        read(k, "p0_velocity", p.p0_velocity);
        if (k.contains("initial_velocity_px")) {
          const auto v = k.at("initial_velocity_px").get<std::vector<double>>();
          if (v.size() != 2) throw Error(ErrorCode::Config, "tracking.kalman.initial_velocity_px needs 2 entries");
          p.initial_velocity_px = {v[0], v[1]};
        }
      }
    }
    if (j.contains("counting")) {
      const json& k = j.at("counting");
      check_keys(k, "counting", {"velocity_half_window", "min_states", "up"});
      read(k, "velocity_half_window", c.counting.velocity_half_window);
      read(k, "min_states", c.counting.min_states);
      if (k.contains("up")) {
        const auto up = k.at("up").get<std::vector<double>>();
        require(up.size() == 3, "counting.up needs 3 entries");
        c.counting.up = {up[0], up[1], up[2]};
      }
    }
    if (j.contains("self_calibration")) {
      const json& s = j.at("self_calibration");
      check_keys(s, "self_calibration", {"enabled", "pairs", "min_bubbles", "max_iterations", "gate_after_px"});
      read(s, "enabled", c.self_calibration);
      read(s, "pairs", c.self_calibration_pairs);
      read(s, "min_bubbles", c.self_calibration_options.min_bubbles);
      read(s, "max_iterations", c.self_calibration_options.lm.max_iterations);
      if (s.contains("gate_after_px")) c.gate_after_calibration_px = s.at("gate_after_px").get<double>();
    }
    if (j.contains("histograms")) {
      const json& h = j.at("histograms");
      check_keys(h, "histograms", {"diameter_bin_mm", "volume_bin_ml", "velocity_bin_cm_s"});
      read(h, "diameter_bin_mm", c.histograms.diameter_bin_mm);
      read(h, "volume_bin_ml", c.histograms.volume_bin_ml);
      read(h, "velocity_bin_cm_s", c.histograms.velocity_bin_cm_s);
    }
    if (j.contains("dumps")) {
      const json& d = j.at("dumps");
      check_keys(d, "dumps", {"detections", "assignments", "tracks"});
      read(d, "detections", c.dump_detections);
      read(d, "assignments", c.dump_assignments);
      read(d, "tracks", c.dump_tracks);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j, path.parent_path());
}

json to_json(const PipelineConfig& c) {
  const KalmanParams& k = c.tracker.kalman;
  json j{{"cam1_dir", c.cam1_dir.string()},
         {"cam2_dir", c.cam2_dir.string()},
         {"cam1_id", c.cam1_id},
         {"cam2_id", c.cam2_id},
         {"calibration", c.calibration.string()},
         {"output_dir", c.output_dir.string()},
         {"counting_row", c.counting_row},
         {"black_threshold", c.black_threshold},
         {"threads", c.threads},
         {"background", {{"window", c.median_window}}},
         {"detection",
          {{"gaussian_sigma", c.detection.gaussian_sigma},
           {"high_threshold", c.detection.high_threshold},
           {"high_floor", c.detection.high_floor},
           {"low_ratio", c.detection.low_ratio},
           {"min_contour_px", c.detection.min_contour_px},
           {"merge_gap_px", c.detection.merge_gap_px},
           {"hull_band_px", c.detection.hull_band_px},
           {"merged_rms_px", c.detection.merged_rms_px},
           {"border_margin_px", c.detection.border_margin_px}}},
         {"matching", {{"gate_px", c.matching.gate_px}, {"area_weight", c.matching.area_weight}}},
         {"reconstruction",
          {{"refine", c.refine},
           {"min_contour_points", c.min_contour_points},
           {"max_rms_px", c.max_refine_rms_px},
           {"skip_merged", c.skip_merged}}},
         {"tracking",
          {{"iou_min", c.tracker.iou_min},
           {"downward_slack_px", c.tracker.downward_slack_px},
           {"sideward_gate_px", c.tracker.sideward_gate_px},
           {"max_age", c.tracker.max_age},
           {"min_hits", c.tracker.min_hits},
           {"kalman",
            {{"q_position", k.q_position},
             {"q_scale_rel", k.q_scale_rel},
             {"q_velocity", k.q_velocity},
             {"q_scale_rate_rel", k.q_scale_rate_rel},
             {"r_position", k.r_position},
             {"r_scale_rel", k.r_scale_rel},
             {"r_aspect_rel", k.r_aspect_rel},
             {"p0_velocity", k.p0_velocity},
             {"initial_velocity_px", {k.initial_velocity_px.x(), k.initial_velocity_px.y()}}}}}},
         {"counting",
          {{"velocity_half_window", c.counting.velocity_half_window},
           {"min_states", c.counting.min_states},
           {"up", {c.counting.up.x(), c.counting.up.y(), c.counting.up.z()}}}},
         {"self_calibration",
          {{"enabled", c.self_calibration},
           {"pairs", c.self_calibration_pairs},
           {"min_bubbles", c.self_calibration_options.min_bubbles},
           {"max_iterations", c.self_calibration_options.lm.max_iterations}}},
         {"histograms",
          {{"diameter_bin_mm", c.histograms.diameter_bin_mm},
           {"volume_bin_ml", c.histograms.volume_bin_ml},
           {"velocity_bin_cm_s", c.histograms.velocity_bin_cm_s}}},
         {"dumps", {{"detections", c.dump_detections}, {"assignments", c.dump_assignments}, {"tracks", c.dump_tracks}}}};
  if (c.gate_after_calibration_px) j["self_calibration"]["gate_after_px"] = *c.gate_after_calibration_px;
  return j;
}

// ---------------------------------------------------------------------------
// Statistics and report

int Histogram::total() const {
  int n = 0;
  for (int c : counts) n += c;
  return n;
}

Histogram make_histogram(std::span<const double> values, double bin_width) {
  if (!(bin_width > 0)) throw Error(ErrorCode::InvalidArgument, "histogram bin width must be positive");
  Histogram h;
  h.bin_width = bin_width;
  if (values.empty()) return h;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double first = std::floor(*lo / bin_width);
  h.origin = first * bin_width;
  h.counts.assign(static_cast<std::size_t>(std::floor(*hi / bin_width) - first) + 1, 0);
  for (double v : values) {
    const auto k = static_cast<std::size_t>(std::floor(v / bin_width) - first);
    ++h.counts[std::min(k, h.counts.size() - 1)];
  }
  return h;
}

namespace {

Summary summarize(const std::vector<double>& values, double bin_width) {
  Summary s;
  s.histogram = make_histogram(values, bin_width);
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

json to_json(const Histogram& h) {
  return {{"bin_width", h.bin_width}, {"origin", h.origin}, {"counts", h.counts}};
}

json to_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}, {"histogram", to_json(s.histogram)}}; }

std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace

StreamReport aggregate(std::span<const CountedBubble> counted, double duration_s, const HistogramParams& bins) {
  if (!(duration_s > 0)) throw Error(ErrorCode::InvalidArgument, "report duration must be positive");
  StreamReport r;
  r.duration_s = duration_s;
  r.bubbles.assign(counted.begin(), counted.end());
  r.bubble_count = static_cast<int>(counted.size());
  std::vector<double> d, v, w;
  double total_mm3 = 0;
  for (const CountedBubble& c : counted) {
    d.push_back(c.d_eq_mm);
    v.push_back(c.volume_mm3 / 1000.0);
    w.push_back(c.rise_velocity_cm_s);
    total_mm3 += c.volume_mm3;
  }
  r.total_volume_ml = total_mm3 / 1000.0;
  r.flow_rate_ml_s = r.total_volume_ml / duration_s;
  r.diameter_mm = summarize(d, bins.diameter_bin_mm);
  r.volume_ml = summarize(v, bins.volume_bin_ml);
  r.velocity_cm_s = summarize(w, bins.velocity_bin_cm_s);
  return r;
}

json to_json(const StreamReport& r) {
  json bubbles = json::array();
  for (const CountedBubble& c : r.bubbles) bubbles.push_back(to_json(c));
  json drops = json::array();
  for (const DropEvent& e : r.drops)
    drops.push_back({{"lost_camera", e.lost_camera},
                     {"partner_index", e.partner_index},
                     {"partner_timestamp_us", e.partner_timestamp_us},
                     {"expected_timestamp_us", e.expected_timestamp_us}});
  return {{"start_time_us", r.start_time_us},
          {"end_time_us", r.end_time_us},
          {"duration_s", r.duration_s},
          {"bubble_count", r.bubble_count},
          {"total_volume_ml", r.total_volume_ml},
          {"flow_rate_ml_s", r.flow_rate_ml_s},
          {"equivalent_diameter_mm", to_json(r.diameter_mm)},
          {"volume_ml", to_json(r.volume_ml)},
          {"rise_velocity_cm_s", to_json(r.velocity_cm_s)},
          {"paired_frames", r.paired_frames},
          {"merged_frames", r.merged_frames},
          {"clock_offset_us", r.clock_offset_us},
          {"dropped_frames", drops},
          {"recalibrated", r.recalibrated},
          {"bubbles", bubbles}};
}

std::string bubbles_csv(const StreamReport& r) {
  std::string out = "track_id,crossing_time_s,frame,d_eq_mm,volume_ml,rise_velocity_cm_s\n";
  for (const CountedBubble& c : r.bubbles)
    out += std::to_string(c.track_id) + ',' + format(c.crossing_time_s) + ',' + std::to_string(c.frame) + ',' +
           format(c.d_eq_mm) + ',' + format(c.volume_mm3 / 1000.0) + ',' + format(c.rise_velocity_cm_s) + '\n';
  return out;
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_low,bin_high,count\n";
  for (std::size_t k = 0; k < h.counts.size(); ++k) {
    const double lo = h.origin + static_cast<double>(k) * h.bin_width;
    out += format(lo) + ',' + format(lo + h.bin_width) + ',' + std::to_string(h.counts[k]) + '\n';
  }
  return out;
}

void write_report(const fs::path& dir, const StreamReport& r) {
  fs::create_directories(dir);
  write_text(dir / "report.json", to_json(r).dump(2) + '\n');
  write_text(dir / "bubbles.csv", bubbles_csv(r));
  write_text(dir / "hist_diameter.csv", histogram_csv(r.diameter_mm.histogram));
  write_text(dir / "hist_volume.csv", histogram_csv(r.volume_ml.histogram));
  write_text(dir / "hist_velocity.csv", histogram_csv(r.velocity_cm_s.histogram));
}

// ---------------------------------------------------------------------------
// Stages

namespace {

using Detections = std::vector<std::vector<BubbleDetection>>;  // per sequence position

Detections detect_sequence(const PipelineConfig& config, const FrameSource& source, const Intrinsicsd& lens,
                           int camera_id, const std::vector<std::size_t>& black, const std::vector<char>& needed) {
  Detections out(source.size());
  std::int64_t frame = -1;
  try {
    BackgroundStream stream(source, config.median_window, black);
    std::size_t pos = 0;
    Image8 fg;
    while (true) {
      frame = -1;
      if (!stream.next(pos, fg)) break;
      frame = source.frames()[pos].index;
      if (needed[pos]) out[pos] = detect_bubbles(fg, config.detection, frame, camera_id, &lens);
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("background/detection camera " + std::to_string(camera_id), frame, e.what());
  }
  return out;
}

bool usable(const BubbleDetection& d, const PipelineConfig& c) {
  return !d.truncated && !(c.skip_merged && d.merged);
}

// Stereo matches of one pair, indices into the full detection lists.
Assignment match_pair(const StereoRigd& rig, const std::vector<BubbleDetection>& d1,
                      const std::vector<BubbleDetection>& d2, const PipelineConfig& config, double gate) {
  std::vector<BubbleDetection> u1, u2;
  std::vector<int> i1, i2;
  for (std::size_t k = 0; k < d1.size(); ++k)
    if (usable(d1[k], config)) {
      u1.push_back(d1[k]);
      i1.push_back(static_cast<int>(k));
    }
  for (std::size_t k = 0; k < d2.size(); ++k)
    if (usable(d2[k], config)) {
      u2.push_back(d2[k]);
      i2.push_back(static_cast<int>(k));
    }
  MatchingParams mp = config.matching;
  mp.gate_px = gate;
  Assignment a = solve_assignment(build_candidates(rig, u1, u2, mp), static_cast<int>(u1.size()),
                                  static_cast<int>(u2.size()));
  // Back to the original indices; truncated or skipped ones count as unmatched.
  Assignment out;
  out.total_cost = a.total_cost;
  std::vector<char> m1(d1.size(), 0), m2(d2.size(), 0);
  for (const auto& [x, y] : a.pairs) {
    out.pairs.emplace_back(i1[x], i2[y]);
    m1[i1[x]] = m2[i2[y]] = 1;
  }
  for (std::size_t k = 0; k < d1.size(); ++k)
    if (!m1[k]) out.unmatched1.push_back(static_cast<int>(k));
  for (std::size_t k = 0; k < d2.size(); ++k)
    if (!m2[k]) out.unmatched2.push_back(static_cast<int>(k));
  return out;
}

std::optional<BubbleObservation> reconstruct(const StereoRigd& rig, const BubbleDetection& a,
                                             const BubbleDetection& b, const PipelineConfig& config) {
  Ellipsoidd e;
  try {
    e = init_ellipsoid(rig, a.ellipse, b.ellipse);
    if (config.refine && static_cast<int>(a.contour.size()) >= config.min_contour_points &&
        static_cast<int>(b.contour.size()) >= config.min_contour_points) {
      const RefineResult r = refine_ellipsoid(rig, e, a.contour, b.contour);
      if (!(r.rms_px <= config.max_refine_rms_px)) return std::nullopt;
      e = r.ellipsoid;
    }
  } catch (const Error&) {
    return std::nullopt;
  }
  if (!e.semi_axes.allFinite() || !(e.semi_axes.minCoeff() > 0)) return std::nullopt;
  BubbleObservation o;
  o.bbox1 = a.bbox;
  o.center1 = a.ellipse.center;
  o.ellipsoid = e;
  return o;
}

struct Prepared {
  SyncResult sync;
  std::vector<std::size_t> frames;  // positions into sync.pairs of the non-black pairs
  Detections det1, det2;
};

Prepared prepare(const PipelineConfig& config, const FrameSource& cam1, const FrameSource& cam2,
                 const StereoRigd& rig, std::optional<std::size_t> limit) {
  Prepared p;
  std::vector<std::size_t> black1, black2;
  try {
    black1 = detect_black_frames(cam1, config.black_threshold);
    black2 = detect_black_frames(cam2, config.black_threshold);
  } catch (const std::exception& e) {
    throw StageError("synchronize", -1, e.what());
  }
  p.sync = synchronize(cam1.frames(), black1, cam2.frames(), black2);
  std::vector<char> need1(cam1.size(), 0), need2(cam2.size(), 0);
  for (std::size_t k = 0; k < p.sync.pairs.size(); ++k) {
    const FramePair& fp = p.sync.pairs[k];
    if (fp.black) continue;
    if (limit && p.frames.size() >= *limit) break;
    p.frames.push_back(k);
    need1[fp.pos1] = need2[fp.pos2] = 1;
  }
  auto run1 = [&] { return detect_sequence(config, cam1, rig.cam1, config.cam1_id, black1, need1); };
  auto run2 = [&] { return detect_sequence(config, cam2, rig.cam2, config.cam2_id, black2, need2); };
  if (config.threads >= 2) {
    auto second = std::async(std::launch::async, run2);
    p.det1 = run1();
    p.det2 = second.get();
  } else {
    p.det1 = run1();
    p.det2 = run2();
  }
  return p;
}

void append_line(std::ofstream& out, const json& j) { out << j.dump() << '\n'; }

}  // namespace

std::vector<SilhouettePair> collect_silhouettes(const PipelineConfig& config, const FrameSource& cam1,
                                                const FrameSource& cam2, const StereoRigd& rig, int pairs) {
  const Prepared p = prepare(config, cam1, cam2, rig, static_cast<std::size_t>(pairs));
  std::vector<SilhouettePair> out;
  for (std::size_t k : p.frames) {
    const FramePair& fp = p.sync.pairs[k];
    const auto &d1 = p.det1[fp.pos1], &d2 = p.det2[fp.pos2];
    const Assignment a = match_pair(rig, d1, d2, config, config.matching.gate_px);
    for (const auto& [i, j] : a.pairs) {
      if (d1[i].merged || d2[j].merged) continue;
      out.push_back({d1[i].contour, d2[j].contour});
    }
  }
  return out;
}

PipelineResult run_pipeline(const PipelineConfig& config, const FrameSource& cam1, const FrameSource& cam2,
                            const StereoRigd& rig0) {
  config.validate();
  PipelineResult result;
  result.rig = rig0;
  Prepared p = prepare(config, cam1, cam2, rig0, std::nullopt);
  result.sync = p.sync;
  const SyncResult& sync = result.sync;

  const bool dumps = !config.output_dir.empty() &&
                     (config.dump_detections || config.dump_assignments || config.dump_tracks);
  if (dumps) fs::create_directories(config.output_dir);
  if (!config.output_dir.empty() && config.dump_detections) {
    std::ofstream out(config.output_dir / "detections.jsonl");
    for (const Detections* dets : {&p.det1, &p.det2})
      for (const auto& frame : *dets)
        for (const BubbleDetection& d : frame) append_line(out, to_json(d));
  }

  double gate = config.matching.gate_px;
  if (config.self_calibration) {
    std::vector<SilhouettePair> obs;
    for (std::size_t n = 0; n < p.frames.size() && n < static_cast<std::size_t>(config.self_calibration_pairs); ++n) {
      const FramePair& fp = sync.pairs[p.frames[n]];
      const auto &d1 = p.det1[fp.pos1], &d2 = p.det2[fp.pos2];
      const Assignment a = match_pair(result.rig, d1, d2, config, gate);
      for (const auto& [i, j] : a.pairs)
        if (!d1[i].merged && !d2[j].merged) obs.push_back({d1[i].contour, d2[j].contour});
    }
    try {
      result.rig = self_calibrate(result.rig, obs, config.self_calibration_options).rig;
    } catch (const Error& e) {
      throw StageError("self-calibration", -1, e.what());
    }
    if (config.gate_after_calibration_px) gate = *config.gate_after_calibration_px;
    result.report.recalibrated = true;
  }

  std::optional<std::ofstream> assignments;
  if (!config.output_dir.empty() && config.dump_assignments)
    assignments.emplace(config.output_dir / "assignments.jsonl");

  const std::int64_t t0 = sync.pairs.empty() ? 0 : sync.pairs.front().pair_time_us;
  const double interval = sync.frame_interval_us > 0 ? sync.frame_interval_us : 1.0;
  Tracker tracker(config.tracker);
  std::int64_t last_frame = -1;
  for (std::size_t k : p.frames) {
    const FramePair& fp = sync.pairs[k];
    const auto &d1 = p.det1[fp.pos1], &d2 = p.det2[fp.pos2];
    PairResult pr;
    pr.pair = k;
    pr.time_s = static_cast<double>(fp.pair_time_us - t0) * 1e-6;
    pr.frame = std::max(last_frame + 1, static_cast<std::int64_t>(std::llround((fp.pair_time_us - t0) / interval)));
    last_frame = pr.frame;
    pr.detections1 = d1.size();
    pr.detections2 = d2.size();
    for (const auto& d : d1) pr.merged = pr.merged || d.merged;
    for (const auto& d : d2) pr.merged = pr.merged || d.merged;
    try {
      const Assignment a = match_pair(result.rig, d1, d2, config, gate);
      if (assignments) {
        json j = to_json(a);
        j["frame_index1"] = cam1.frames()[fp.pos1].index;
        j["frame_index2"] = cam2.frames()[fp.pos2].index;
        append_line(*assignments, j);
      }
      for (const auto& [i, j] : a.pairs) {
        std::optional<BubbleObservation> o = reconstruct(result.rig, d1[i], d2[j], config);
        if (!o) {
          ++result.failed_reconstructions;
          continue;
        }
        o->det1 = i;
        o->det2 = j;
        pr.bubbles.push_back(*o);
      }
      tracker.step(pr.frame, pr.time_s, pr.bubbles);
    } catch (const std::exception& e) {
      throw StageError("match/reconstruct/track", cam1.frames()[fp.pos1].index, e.what());
    }
    result.pairs.push_back(std::move(pr));
  }
  tracker.finish();
  result.tracks = tracker.tracks();

  if (!config.output_dir.empty() && config.dump_tracks) {
    std::ofstream out(config.output_dir / "tracks.jsonl");
    for (const Track& t : result.tracks) append_line(out, to_json(t));
  }

  CountingParams counting = config.counting;
  counting.row = config.counting_row;
  result.counted = count_at_surface(result.tracks, counting, config.tracker.min_hits);
  // Crossing times relative to the first paired frame, as in the tracks.

  double duration = interval * 1e-6;
  if (!sync.pairs.empty())
    duration += static_cast<double>(sync.pairs.back().pair_time_us - sync.pairs.front().pair_time_us) * 1e-6;
  const bool recalibrated = result.report.recalibrated;
  result.report = aggregate(result.counted, duration, config.histograms);
  result.report.recalibrated = recalibrated;
  result.report.start_time_us = t0;
  result.report.end_time_us = sync.pairs.empty() ? 0 : sync.pairs.back().pair_time_us;
  result.report.paired_frames = static_cast<int>(sync.pairs.size());
  for (const PairResult& pr : result.pairs) result.report.merged_frames += pr.merged;
  result.report.drops = sync.drops;
  result.report.clock_offset_us = sync.offset_us;
  return result;
}

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  require(!config.cam1_dir.empty() && fs::is_directory(config.cam1_dir), "cam1_dir is not a directory: " + config.cam1_dir.string());
  require(!config.cam2_dir.empty() && fs::is_directory(config.cam2_dir), "cam2_dir is not a directory: " + config.cam2_dir.string());
  require(!config.calibration.empty() && fs::is_regular_file(config.calibration),
          "calibration file not found: " + config.calibration.string());
  require(!config.output_dir.empty(), "output_dir is required");
  const CalibrationFile calib = load_calibration(config.calibration);
  std::optional<PgmDirectorySource> s1, s2;
  try {
    s1.emplace(config.cam1_dir, config.cam1_id);
    s2.emplace(config.cam2_dir, config.cam2_id);
  } catch (const Error& e) {
    throw Error(ErrorCode::Unsynchronizable, e.what());
  }
  PipelineResult r = run_pipeline(config, *s1, *s2, calib.rig);
  write_report(config.output_dir, r.report);
  {
    std::ofstream out(config.output_dir / "counted.jsonl");
    for (const CountedBubble& c : r.counted) append_line(out, to_json(c));
  }
  if (config.self_calibration) save_calibration(config.output_dir / "calibration_refined.json", {r.rig, true});
  return r;
}

}  // namespace bubblestream
