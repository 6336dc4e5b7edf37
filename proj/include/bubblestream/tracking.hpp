#pragma once

// SORT-style tracking of reconstructed bubbles in the camera-1 image and
// single counting at a horizontal reference row.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "bubblestream/detection.hpp"
#include "bubblestream/matching.hpp"
#include "bubblestream/quadric.hpp"

namespace bubblestream {

/// Intersection over union of two boxes, 0 when either is empty.
double iou(const Box& a, const Box& b);

struct KalmanParams {
  // Process noise per frame. Position terms are variances in px²; the scale
  // terms are standard deviations relative to the current box area.
  double q_position = 1.0;
  double q_scale_rel = 1e-2;
  double q_velocity = 1e-1;
  double q_scale_rate_rel = 1e-4;
  // Measurement noise: px² for the centre, relative deviations for s and r.
  double r_position = 1.0;
  double r_scale_rel = 0.1;
  double r_aspect_rel = 0.05;
  // Initial uncertainty of the unobserved rates.
  double p0_velocity = 1e4;
  // Centre velocity of a new track (px/frame), e.g. the expected image rise.
  Eigen::Vector2d initial_velocity_px = Eigen::Vector2d::Zero();
};

/// Constant-velocity filter over (u, v, s, r, u̇, v̇, ṡ): box centre, area and
/// width/height ratio.
class BoxFilter {
 public:
  using State = Eigen::Matrix<double, 7, 1>;
  using Covariance = Eigen::Matrix<double, 7, 7>;

  BoxFilter(const Box& box, const KalmanParams& params = {});

  /// Advances one frame and returns the predicted box.
  Box predict();
  void update(const Box& box);
  Box box() const { return to_box(x_); }
  const State& state() const { return x_; }
  const Covariance& covariance() const { return P_; }

  static Eigen::Vector4d measurement(const Box& box);
  static Box to_box(const State& x);

 private:
  KalmanParams params_;
  State x_ = State::Zero();
  Covariance P_ = Covariance::Zero();
};

/// One reconstructed bubble of a synchronized frame pair.
struct BubbleObservation {
  Box bbox1;                  // camera-1 bounding box, ideal pixels
  Eigen::Vector2d center1;    // camera-1 ellipse centre
  Ellipsoidd ellipsoid;
  int det1 = -1;              // detection indices in the pair
  int det2 = -1;
};

struct TrackState {
  std::int64_t frame = 0;  // synchronized pair index
  double time_s = 0;
  BubbleObservation observation;
};

enum class TrackStatus { Active, Lost, Finished };

struct Track {
  int id = 0;
  std::vector<TrackState> states;
  BoxFilter filter;
  TrackStatus status = TrackStatus::Active;
  int hits = 0;
  int misses = 0;  // consecutive frames without association
};

struct TrackerParams {
  KalmanParams kalman;
  double iou_min = 0.1;
  double downward_slack_px = 2.0;
  double sideward_gate_px = 25.0;  // per frame
  int max_age = 3;
  int min_hits = 3;
};

class Tracker {
 public:
  explicit Tracker(const TrackerParams& params = {}) : params_(params) {}

  /// Frames must be given in increasing order; gaps are predicted through.
  void step(std::int64_t frame, double time_s, std::span<const BubbleObservation> observations);
  /// Marks every remaining track finished.
  void finish();

  const std::vector<Track>& tracks() const { return tracks_; }
  const TrackerParams& params() const { return params_; }

 private:
  TrackerParams params_;
  std::vector<Track> tracks_;
  std::vector<std::size_t> live_;  // indices of tracks not finished
  std::int64_t last_frame_ = 0;
  bool started_ = false;
  int next_id_ = 1;
};

/// IoU association of predicted track boxes to new observations through
/// solve_assignment with cost 1 - IoU. `previous` holds each track's last
/// observed box, the reference for the motion gates; `frames` the elapsed
/// frames since then.
Assignment associate(std::span<const Box> predicted, std::span<const Box> previous, std::span<const int> frames,
                     std::span<const Box> detections, const TrackerParams& params);

struct CountedBubble {
  int track_id = 0;
  double crossing_time_s = 0;
  std::int64_t frame = 0;  // state nearest to the crossing
  double d_eq_mm = 0;
  double volume_mm3 = 0;
  double rise_velocity_cm_s = 0;
};

struct CountingParams {
  double row = 400;
  int velocity_half_window = 5;
  int min_states = 3;
  Eigen::Vector3d up = Eigen::Vector3d(0, -1, 0);  // world up, camera-1 frame
};

/// First upward crossing of the row by each eligible track's camera-1 centre.
/// Tracks whose first state is at or above the row are skipped.
std::vector<CountedBubble> count_at_surface(std::span<const Track> tracks, const CountingParams& params,
                                            int min_hits = 3);

nlohmann::json to_json(const Track& t);
nlohmann::json to_json(const CountedBubble& c);
CountedBubble counted_bubble_from_json(const nlohmann::json& j);

}  // namespace bubblestream
