#include "bubblestream/tracking.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/QR>

#include "bubblestream/error.hpp"

namespace bubblestream {

double iou(const Box& a, const Box& b) {
  const double w = std::min(a.u1, b.u1) - std::max(a.u0, b.u0);
  const double h = std::min(a.v1, b.v1) - std::max(a.v0, b.v0);
  if (w <= 0 || h <= 0) return 0.0;
  const double inter = w * h;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Eigen::Vector4d BoxFilter::measurement(const Box& box) {
  const Eigen::Vector2d c = box.center();
  return {c.x(), c.y(), box.area(), box.width() / box.height()};
}

Box BoxFilter::to_box(const State& x) {
  const double s = std::max(x[2], 1e-12), r = std::max(x[3], 1e-12);
  const double w = std::sqrt(s * r), h = s / w;
  return {x[0] - 0.5 * w, x[1] - 0.5 * h, x[0] + 0.5 * w, x[1] + 0.5 * h};
}

BoxFilter::BoxFilter(const Box& box, const KalmanParams& params) : params_(params) {
  if (!(box.width() > 0) || !(box.height() > 0)) throw Error(ErrorCode::InvalidArgument, "empty track box");
  x_.head<4>() = measurement(box);
  x_.segment<2>(4) = params_.initial_velocity_px;
  const double s = x_[2], r = x_[3];
  P_.diagonal() << params_.r_position, params_.r_position, std::pow(params_.r_scale_rel * s, 2),
      std::pow(params_.r_aspect_rel * r, 2), params_.p0_velocity, params_.p0_velocity, params_.p0_velocity * s;
}

Box BoxFilter::predict() {
  if (x_[2] + x_[6] <= 0) x_[6] = 0;
  Covariance F = Covariance::Identity();
  F(0, 4) = F(1, 5) = F(2, 6) = 1;
  x_ = F * x_;
  const double s = x_[2];
  State q;
  q << params_.q_position, params_.q_position, std::pow(params_.q_scale_rel * s, 2), 0, params_.q_velocity,
      params_.q_velocity, std::pow(params_.q_scale_rate_rel * s, 2);
  P_ = F * P_ * F.transpose();
  P_.diagonal() += q;
  return box();
}

void BoxFilter::update(const Box& box) {
  const Eigen::Vector4d z = measurement(box);
  Eigen::Matrix<double, 4, 7> H = Eigen::Matrix<double, 4, 7>::Zero();
  H.leftCols<4>().setIdentity();
  Eigen::Vector4d rdiag(params_.r_position, params_.r_position, std::pow(params_.r_scale_rel * z[2], 2),
                        std::pow(params_.r_aspect_rel * z[3], 2));
  const Eigen::Matrix4d S = H * P_ * H.transpose() + Eigen::Matrix4d(rdiag.asDiagonal());
  // S can be singular once the filter is certain (zero noise); the
  // pseudo-inverse then ignores the already determined directions.
  const Eigen::Matrix<double, 7, 4> K =
      (S.completeOrthogonalDecomposition().solve(H * P_.transpose())).transpose();
  x_ += K * (z - H * x_);
  P_ = (Covariance::Identity() - K * H) * P_;
  P_ = 0.5 * (P_ + P_.transpose());
  x_[2] = std::max(x_[2], 1e-9);
  x_[3] = std::max(x_[3], 1e-9);
}

Assignment associate(std::span<const Box> predicted, std::span<const Box> previous, std::span<const int> frames,
                     std::span<const Box> detections, const TrackerParams& params) {
  if (previous.size() != predicted.size() || frames.size() != predicted.size())
    throw Error(ErrorCode::DimensionMismatch, "track box lists differ in length");
  std::vector<MatchCandidate> edges;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Eigen::Vector2d old = previous[i].center();
    const int n = std::max(frames[i], 1);
    for (std::size_t j = 0; j < detections.size(); ++j) {
      const Eigen::Vector2d c = detections[j].center();
      if (c.y() > old.y() + params.downward_slack_px) continue;
      if (std::abs(c.x() - old.x()) > params.sideward_gate_px * n) continue;
      const double overlap = iou(predicted[i], detections[j]);
      if (overlap < params.iou_min) continue;
      edges.push_back({static_cast<int>(i), static_cast<int>(j), 0.0, 1.0 - overlap});
    }
  }
  return solve_assignment(edges, static_cast<int>(predicted.size()), static_cast<int>(detections.size()));
}

void Tracker::step(std::int64_t frame, double time_s, std::span<const BubbleObservation> observations) {
  if (started_ && frame <= last_frame_) throw Error(ErrorCode::InvalidArgument, "tracker frames must increase");
  const int elapsed = started_ ? static_cast<int>(frame - last_frame_) : 1;
  started_ = true;
  last_frame_ = frame;

  std::vector<Box> predicted, previous, detections;
  std::vector<int> gaps;
  for (std::size_t k : live_) {
    Track& t = tracks_[k];
    Box p;
    for (int i = 0; i < elapsed; ++i) p = t.filter.predict();
    predicted.push_back(p);
    previous.push_back(t.states.back().observation.bbox1);
    gaps.push_back(static_cast<int>(frame - t.states.back().frame));
  }
  for (const BubbleObservation& o : observations) detections.push_back(o.bbox1);
  const Assignment a = associate(predicted, previous, gaps, detections, params_);

  std::vector<char> matched(live_.size(), 0);
  for (const auto& [i, j] : a.pairs) {
    Track& t = tracks_[live_[i]];
    t.filter.update(observations[j].bbox1);
    t.states.push_back({frame, time_s, observations[j]});
    ++t.hits;
    t.misses = 0;
    t.status = TrackStatus::Active;
    matched[i] = 1;
  }
  std::vector<std::size_t> still;
  for (std::size_t i = 0; i < live_.size(); ++i) {
    Track& t = tracks_[live_[i]];
    if (!matched[i]) {
      t.misses += elapsed;
      t.status = t.misses > params_.max_age ? TrackStatus::Finished : TrackStatus::Lost;
    }
    if (t.status != TrackStatus::Finished) still.push_back(live_[i]);
  }
  for (int j : a.unmatched2) {
    Track t{next_id_++, {{frame, time_s, observations[j]}}, BoxFilter(observations[j].bbox1, params_.kalman)};
    t.hits = 1;
    still.push_back(tracks_.size());
    tracks_.push_back(std::move(t));
  }
  live_ = std::move(still);
}

void Tracker::finish() {
  for (std::size_t k : live_) tracks_[k].status = TrackStatus::Finished;
  live_.clear();
}

std::vector<CountedBubble> count_at_surface(std::span<const Track> tracks, const CountingParams& params,
                                            int min_hits) {
  std::vector<CountedBubble> out;
  for (const Track& t : tracks) {
    const auto& s = t.states;
    if (t.hits < min_hits || static_cast<int>(s.size()) < std::max(params.min_states, 1)) continue;
    if (s.front().observation.center1.y() <= params.row) continue;
    std::size_t k = 0;
    while (k + 1 < s.size() && !(s[k + 1].observation.center1.y() <= params.row)) ++k;
    if (k + 1 >= s.size()) continue;
    const double v0 = s[k].observation.center1.y(), v1 = s[k + 1].observation.center1.y();
    const double f = (v0 - params.row) / (v0 - v1);
    const std::size_t near = f <= 0.5 ? k : k + 1;

    CountedBubble c;
    c.track_id = t.id;
    c.crossing_time_s = s[k].time_s + f * (s[k + 1].time_s - s[k].time_s);
    c.frame = s[near].frame;
    c.d_eq_mm = s[near].observation.ellipsoid.equivalent_diameter();
    c.volume_mm3 = M_PI / 6.0 * c.d_eq_mm * c.d_eq_mm * c.d_eq_mm;

    const std::int64_t lo = c.frame - params.velocity_half_window, hi = c.frame + params.velocity_half_window;
    std::size_t a = near, b = near;
    while (a > 0 && s[a - 1].frame >= lo) --a;
    while (b + 1 < s.size() && s[b + 1].frame <= hi) ++b;
    if (b > a && s[b].time_s > s[a].time_s) {
      const double rise =
          params.up.normalized().dot(s[b].observation.ellipsoid.center - s[a].observation.ellipsoid.center);
      c.rise_velocity_cm_s = rise / (s[b].time_s - s[a].time_s) / 10.0;
    }
    out.push_back(c);
  }
  std::sort(out.begin(), out.end(), [](const CountedBubble& x, const CountedBubble& y) {
    return x.crossing_time_s != y.crossing_time_s ? x.crossing_time_s < y.crossing_time_s : x.track_id < y.track_id;
  });
  return out;
}

namespace {

nlohmann::json to_json(const Box& b) { return {b.u0, b.v0, b.u1, b.v1}; }

nlohmann::json to_json(const Ellipsoidd& e) {
  const Eigen::Quaterniond q(e.orientation);
  return {{"center", {e.center.x(), e.center.y(), e.center.z()}},
          {"q", {q.w(), q.x(), q.y(), q.z()}},
          {"semi_axes", {e.semi_axes.x(), e.semi_axes.y(), e.semi_axes.z()}}};
}

const char* status_name(TrackStatus s) {
  switch (s) {
    case TrackStatus::Active: return "active";
    case TrackStatus::Lost: return "lost";
    case TrackStatus::Finished: return "finished";
  }
  return "finished";
}

}  // namespace

nlohmann::json to_json(const Track& t) {
  nlohmann::json states = nlohmann::json::array();
  for (const TrackState& s : t.states)
    states.push_back({{"frame", s.frame},
                      {"time_s", s.time_s},
                      {"bbox1", to_json(s.observation.bbox1)},
                      {"center1", {s.observation.center1.x(), s.observation.center1.y()}},
                      {"ellipsoid", to_json(s.observation.ellipsoid)},
                      {"d_eq_mm", s.observation.ellipsoid.equivalent_diameter()}});
  return {{"id", t.id}, {"status", status_name(t.status)}, {"hits", t.hits}, {"states", states}};
}

nlohmann::json to_json(const CountedBubble& c) {
  return {{"track_id", c.track_id},     {"crossing_time_s", c.crossing_time_s},
          {"frame", c.frame},           {"d_eq_mm", c.d_eq_mm},
          {"volume_mm3", c.volume_mm3}, {"rise_velocity_cm_s", c.rise_velocity_cm_s}};
}

CountedBubble counted_bubble_from_json(const nlohmann::json& j) {
  CountedBubble c;
  c.track_id = j.value("track_id", 0);
  c.crossing_time_s = j.at("crossing_time_s").get<double>();
  c.frame = j.value("frame", std::int64_t{0});
  c.d_eq_mm = j.at("d_eq_mm").get<double>();
  c.volume_mm3 = j.contains("volume_mm3") ? j.at("volume_mm3").get<double>()
                                          : M_PI / 6.0 * c.d_eq_mm * c.d_eq_mm * c.d_eq_mm;
  c.rise_velocity_cm_s = j.value("rise_velocity_cm_s", 0.0);
  return c;
}

}  // namespace bubblestream
