#pragma once

// Synthetic bright-field stereo recordings of rising (or falling) ellipsoidal
// bubbles with known geometry, timing and pairing.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include <json.hpp>

#include "bubblestream/calibration_io.hpp"
#include "bubblestream/conic.hpp"
#include "bubblestream/geometry.hpp"
#include "bubblestream/image.hpp"
#include "bubblestream/quadric.hpp"

namespace bubblestream {

struct RenderStyle {
  double rim_width_px = 2.0;  // dark band just inside the outline
  double rim = 20;
  double interior = 170;
  double background = 200;
  double black = 3;           // synchronization frames
};

struct FrameDrop {
  int camera = 2;
  std::int64_t trigger = 0;
};

struct SceneConfig {
  StereoRigd rig = reference_rig();
  int width = 1024;
  int height = 800;
  double frame_rate_hz = 80;
  double duration_s = 10;
  std::int64_t start_time_us = 1'600'000'000'000'000;

  // Bubble population.
  double bubble_rate_hz = 1;
  bool regular_arrivals = false;     // evenly spaced instead of Poisson
  double first_release_s = 0.0;
  double diameter_log_mean = 1.7405;  // ln(mm); median 5.7 mm
  double diameter_log_sigma = 0.1;
  std::vector<double> diameters_mm;   // if set, cycled instead of sampling
  double aspect_ratio = 1.0;          // vertical / horizontal semi-axis
  double tilt_deg = 0.0;              // random tilt of the symmetry axis
  double rise_velocity_cm_s = 28;     // negative values fall
  double helix_radius_mm = 0;
  double helix_period_s = 0.5;
  double wobble_mm = 0;               // vertical oscillation amplitude
  double wobble_period_s = 0.25;
  double corridor_half_width_mm = 40;
  std::optional<Eigen::Vector3d> corridor_center;  // default: where the image centres' rays meet
  std::optional<double> release_y_mm;  // camera-1 y where bubbles appear; default below the views
  std::optional<double> exit_y_mm;     // and where they leave; default above the views

  // Sensor and recording.
  double noise_sigma = 1.0;
  double contour_jitter_px = 0.0;
  double texture_amplitude = 3.0;
  int sediment_blobs = 0;
  int black_interval = 5000;
  int black_phase = 0;
  double clock_offset_s = 0;         // camera-1 clock minus camera-2 clock
  double drift_us_per_s = 0;         // camera-2 clock rate error
  double timestamp_jitter_us = 0;    // uniform +-
  std::vector<FrameDrop> drops;
  std::int64_t counter_start1 = 0;
  std::int64_t counter_start2 = 0;
  std::uint64_t seed = 1;
  RenderStyle style;

  void validate() const;
};

SceneConfig scene_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneConfig& c);

struct TruthBubble {
  int id = 0;
  double release_time_s = 0;
  double d_eq_mm = 0;
  double volume_mm3 = 0;
  double rise_velocity_cm_s = 0;
  Eigen::Vector3d semi_axes = Eigen::Vector3d::Ones();
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d start = Eigen::Vector3d::Zero();  // release position (mm, camera-1 frame)
  double lifetime_s = 0;                            // from release to leaving the column
  double phase = 0;                                 // helix phase
};

struct TruthObservation {
  int bubble_id = 0;
  Ellipsoidd ellipsoid;
  Conicd conic1;  // ideal (undistorted) pixels
  Conicd conic2;
};

struct TruthFrame {
  std::int64_t trigger = 0;
  double time_s = 0;
  bool black = false;
  std::optional<FrameInfo> cam1;  // nullopt when that camera dropped the frame
  std::optional<FrameInfo> cam2;
  std::vector<TruthObservation> bubbles;
};

struct GroundTruth {
  double frame_rate_hz = 0;
  double clock_offset_us = 0;
  int width = 0;
  int height = 0;
  std::vector<TruthBubble> bubbles;
  std::vector<TruthFrame> frames;

  /// Bubble ids whose camera-1 centre moves from below `row` to above it at
  /// least once, excluding bubbles that start above it.
  std::vector<int> crossing(double row) const;
  /// Number of upward crossings of `row` by each bubble's camera-1 centre.
  std::vector<int> crossing_count(double row) const;
};

nlohmann::json to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const nlohmann::json& j);

/// Renders frames on demand. Heavy tables (undistortion of the supersampling
/// grid, noise) are built lazily and shared.
class Scene {
 public:
  explicit Scene(SceneConfig config);
  ~Scene();
  Scene(const Scene&) = delete;
  Scene& operator=(const Scene&) = delete;

  const SceneConfig& config() const { return config_; }
  const GroundTruth& ground_truth() const { return truth_; }
  std::int64_t trigger_count() const { return static_cast<std::int64_t>(truth_.frames.size()); }

  /// Ellipsoid of a bubble at time t (s), nullopt if not in the water column.
  std::optional<Ellipsoidd> bubble_at(const TruthBubble& b, double t) const;

  Image8 render(int camera, std::int64_t trigger) const;
  /// Intensities at the given pixels only, identical to render() there.
  std::vector<std::uint8_t> render_pixels(int camera, std::int64_t trigger,
                                          const std::vector<Eigen::Vector2i>& pixels) const;

 private:
  struct Tables;
  struct Shape;
  const Tables& tables(int camera) const;
  std::vector<Shape> shapes(int camera, std::int64_t trigger) const;
  double shade(const Tables& tables, const std::vector<Shape>& shapes, int c, int r) const;

  SceneConfig config_;
  GroundTruth truth_;
  Eigen::Vector3d corridor_center_;
  mutable std::unique_ptr<Tables> tables_[2];
};

/// Frames of one camera of a Scene as a FrameSource.
class SyntheticSequence : public FrameSource {
 public:
  SyntheticSequence(const Scene& scene, int camera);
  const std::vector<FrameInfo>& frames() const override { return infos_; }
  int width() const override { return scene_.config().width; }
  int height() const override { return scene_.config().height; }
  Image8 load(std::size_t position) const override;
  std::vector<std::uint8_t> diagonals(std::size_t position) const override;
  std::int64_t trigger(std::size_t position) const { return triggers_.at(position); }

 private:
  const Scene& scene_;
  int camera_;
  std::vector<FrameInfo> infos_;
  std::vector<std::int64_t> triggers_;
};

/// Writes `<out>/cam1`, `<out>/cam2` (PGM frames), `<out>/calibration.json`
/// and `<out>/ground_truth.json`. Throws Error(Io) if `out` exists and is not
/// empty.
GroundTruth generate(const SceneConfig& config, const std::filesystem::path& out);

/// Extrinsic perturbation of camera 2: rotation by Euler angles (degrees,
/// XYZ order: R = Rz Ry Rx applied on top of the current rotation) and a
/// change of the translation direction by adding `t_dir_mm` before
/// rescaling to the original baseline length.
StereoRigd perturb_rig(const StereoRigd& rig, const Eigen::Vector3d& rot_deg, const Eigen::Vector3d& t_dir_mm);

}  // namespace bubblestream
