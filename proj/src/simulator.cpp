#include "bubblestream/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "bubblestream/error.hpp"

namespace bubblestream {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kNoiseBits = 20;
constexpr std::size_t kNoiseMask = (std::size_t(1) << kNoiseBits) - 1;
constexpr int kJitterOrders = 15;  // harmonics 2..16 of the contour perturbation
const Eigen::Vector2d kSubsamples[4] = {{-0.25, -0.25}, {0.25, -0.25}, {-0.25, 0.25}, {0.25, 0.25}};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0;
  for (std::uint64_t p : parts) h = splitmix64(h ^ p);
  return h;
}

double unit(std::uint64_t x) { return double(x >> 11) * 0x1.0p-53; }

Eigen::Matrix3d tilt_rotation(std::mt19937_64& rng, double max_deg) {
  if (max_deg <= 0) return Eigen::Matrix3d::Identity();
  std::uniform_real_distribution<double> u(0, 1);
  const double azimuth = 2 * M_PI * u(rng);
  const double angle = max_deg * M_PI / 180 * u(rng);
  return Eigen::AngleAxisd(angle, Eigen::Vector3d(std::cos(azimuth), 0, std::sin(azimuth))).toRotationMatrix();
}

// Camera-1 y at which the pinhole projection of (x, y, z) reaches image row v.
std::optional<double> y_at_row(const Camerad& cam, double x, double z, double v, double y_mid) {
  auto row = [&](double y) -> std::optional<double> {
    const Eigen::Vector3d Xc = cam.pose.transform(Eigen::Vector3d(x, y, z));
    if (Xc.z() <= 0) return std::nullopt;
    return cam.intrinsics.fy * Xc.y() / Xc.z() + cam.intrinsics.cy;
  };
  double lo = y_mid - 2000, hi = y_mid + 2000;
  const auto rlo = row(lo), rhi = row(hi);
  if (!rlo || !rhi || (*rlo - v) * (*rhi - v) > 0) return std::nullopt;
  const bool increasing = *rhi > *rlo;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    const auto r = row(mid);
    if (!r) return std::nullopt;
    if ((*r < v) == increasing) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

json vec(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
json mat(const Eigen::Matrix3d& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}
Eigen::Vector3d vec3(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }
Eigen::Matrix3d mat3(const json& j) {
  Eigen::Matrix3d m;
  for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = j.at(k).get<double>();
  return m;
}
json frame_info(const std::optional<FrameInfo>& f) {
  if (!f) return nullptr;
  return {{"index", f->index}, {"timestamp_us", f->timestamp_us}};
}

}  // namespace

void SceneConfig::validate() const {
  auto fail = [](const std::string& what) { return Error(ErrorCode::Config, "scene: " + what); };
  rig.validate();
  if (width <= 0 || height <= 0) throw fail("image size must be positive");
  if (!(frame_rate_hz > 0)) throw fail("frame_rate_hz must be positive");
  if (!(duration_s > 0)) throw fail("duration_s must be positive");
  if (!(bubble_rate_hz >= 0)) throw fail("bubble_rate_hz must be >= 0");
  if (!(diameter_log_sigma >= 0)) throw fail("diameter_log_sigma must be >= 0");
  for (double d : diameters_mm)
    if (!(d > 0)) throw fail("diameters_mm must be positive");
  if (!(aspect_ratio > 0)) throw fail("aspect_ratio must be positive");
  if (!(helix_period_s > 0) || !(wobble_period_s > 0)) throw fail("periods must be positive");
  if (!(corridor_half_width_mm > 0)) throw fail("corridor_half_width_mm must be positive");
  if (!(noise_sigma >= 0) || !(contour_jitter_px >= 0)) throw fail("noise levels must be >= 0");
  if (black_interval < 2) throw fail("black_interval must be >= 2");
  if (black_phase < 0 || black_phase >= black_interval) throw fail("black_phase outside [0, black_interval)");
  if (!(timestamp_jitter_us >= 0)) throw fail("timestamp_jitter_us must be >= 0");
  for (const FrameDrop& d : drops)
    if (d.camera != 1 && d.camera != 2) throw fail("drop camera must be 1 or 2");
}

SceneConfig scene_config_from_json(const json& j) {
  SceneConfig c;
  try {
    if (j.contains("calibration")) c.rig = calibration_from_json(j.at("calibration")).rig;
    if (j.contains("calibration_file")) c.rig = load_calibration(j.at("calibration_file").get<std::string>()).rig;
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.frame_rate_hz = j.value("frame_rate_hz", c.frame_rate_hz);
    c.duration_s = j.value("duration_s", c.duration_s);
    c.start_time_us = j.value("start_time_us", c.start_time_us);
    c.bubble_rate_hz = j.value("bubble_rate_hz", c.bubble_rate_hz);
    c.regular_arrivals = j.value("regular_arrivals", c.regular_arrivals);
    c.first_release_s = j.value("first_release_s", c.first_release_s);
    c.diameter_log_mean = j.value("diameter_log_mean", c.diameter_log_mean);
    c.diameter_log_sigma = j.value("diameter_log_sigma", c.diameter_log_sigma);
    c.diameters_mm = j.value("diameters_mm", c.diameters_mm);
    c.aspect_ratio = j.value("aspect_ratio", c.aspect_ratio);
    c.tilt_deg = j.value("tilt_deg", c.tilt_deg);
    c.rise_velocity_cm_s = j.value("rise_velocity_cm_s", c.rise_velocity_cm_s);
    c.helix_radius_mm = j.value("helix_radius_mm", c.helix_radius_mm);
    c.helix_period_s = j.value("helix_period_s", c.helix_period_s);
    c.wobble_mm = j.value("wobble_mm", c.wobble_mm);
    c.wobble_period_s = j.value("wobble_period_s", c.wobble_period_s);
    c.corridor_half_width_mm = j.value("corridor_half_width_mm", c.corridor_half_width_mm);
    if (j.contains("corridor_center")) c.corridor_center = vec3(j.at("corridor_center"));
    if (j.contains("release_y_mm")) c.release_y_mm = j.at("release_y_mm").get<double>();
    if (j.contains("exit_y_mm")) c.exit_y_mm = j.at("exit_y_mm").get<double>();
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.contour_jitter_px = j.value("contour_jitter_px", c.contour_jitter_px);
    c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
    c.sediment_blobs = j.value("sediment_blobs", c.sediment_blobs);
    c.black_interval = j.value("black_interval", c.black_interval);
    c.black_phase = j.value("black_phase", c.black_phase);
    c.clock_offset_s = j.value("clock_offset_s", c.clock_offset_s);
    c.drift_us_per_s = j.value("drift_us_per_s", c.drift_us_per_s);
    c.timestamp_jitter_us = j.value("timestamp_jitter_us", c.timestamp_jitter_us);
    if (j.contains("drops"))
      for (const json& d : j.at("drops")) c.drops.push_back({d.at("camera").get<int>(), d.at("trigger").get<std::int64_t>()});
    c.counter_start1 = j.value("counter_start1", c.counter_start1);
    c.counter_start2 = j.value("counter_start2", c.counter_start2);
    c.seed = j.value("seed", c.seed);
    if (j.contains("style")) {
      const json& s = j.at("style");
      c.style.rim_width_px = s.value("rim_width_px", c.style.rim_width_px);
      c.style.rim = s.value("rim", c.style.rim);
      c.style.interior = s.value("interior", c.style.interior);
      c.style.background = s.value("background", c.style.background);
      c.style.black = s.value("black", c.style.black);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("scene: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const SceneConfig& c) {
  json j = {{"calibration", to_json(CalibrationFile{c.rig, false})},
            {"width", c.width},
            {"height", c.height},
            {"frame_rate_hz", c.frame_rate_hz},
            {"duration_s", c.duration_s},
            {"start_time_us", c.start_time_us},
            {"bubble_rate_hz", c.bubble_rate_hz},
            {"regular_arrivals", c.regular_arrivals},
            {"first_release_s", c.first_release_s},
            {"diameter_log_mean", c.diameter_log_mean},
            {"diameter_log_sigma", c.diameter_log_sigma},
            {"diameters_mm", c.diameters_mm},
            {"aspect_ratio", c.aspect_ratio},
            {"tilt_deg", c.tilt_deg},
            {"rise_velocity_cm_s", c.rise_velocity_cm_s},
            {"helix_radius_mm", c.helix_radius_mm},
            {"helix_period_s", c.helix_period_s},
            {"wobble_mm", c.wobble_mm},
            {"wobble_period_s", c.wobble_period_s},
            {"corridor_half_width_mm", c.corridor_half_width_mm},
            {"noise_sigma", c.noise_sigma},
            {"contour_jitter_px", c.contour_jitter_px},
            {"texture_amplitude", c.texture_amplitude},
            {"sediment_blobs", c.sediment_blobs},
            {"black_interval", c.black_interval},
            {"black_phase", c.black_phase},
            {"clock_offset_s", c.clock_offset_s},
            {"drift_us_per_s", c.drift_us_per_s},
            {"timestamp_jitter_us", c.timestamp_jitter_us},
            {"counter_start1", c.counter_start1},
            {"counter_start2", c.counter_start2},
            {"seed", c.seed},
            {"style",
             {{"rim_width_px", c.style.rim_width_px},
              {"rim", c.style.rim},
              {"interior", c.style.interior},
              {"background", c.style.background},
              {"black", c.style.black}}}};
  if (c.corridor_center) j["corridor_center"] = vec(*c.corridor_center);
  if (c.release_y_mm) j["release_y_mm"] = *c.release_y_mm;
  if (c.exit_y_mm) j["exit_y_mm"] = *c.exit_y_mm;
  json drops = json::array();
  for (const FrameDrop& d : c.drops) drops.push_back({{"camera", d.camera}, {"trigger", d.trigger}});
  j["drops"] = drops;
  return j;
}

std::vector<int> GroundTruth::crossing_count(double row) const {
  std::vector<int> count(bubbles.size(), 0);
  std::vector<double> last(bubbles.size(), NAN);
  std::vector<char> excluded(bubbles.size(), 0);
  for (const TruthFrame& f : frames)
    for (const TruthObservation& o : f.bubbles) {
      double v;
      try {
        v = ellipse_from_conic(o.conic1).center.y();
      } catch (const Error&) {
        continue;
      }
      const auto id = static_cast<std::size_t>(o.bubble_id);
      if (std::isnan(last[id]) && v <= row) excluded[id] = 1;
      if (!std::isnan(last[id]) && last[id] > row && v <= row) ++count[id];
      last[id] = v;
    }
  for (std::size_t i = 0; i < count.size(); ++i)
    if (excluded[i]) count[i] = 0;
  return count;
}

std::vector<int> GroundTruth::crossing(double row) const {
  const std::vector<int> count = crossing_count(row);
  std::vector<int> ids;
  for (std::size_t i = 0; i < count.size(); ++i)
    if (count[i] > 0) ids.push_back(static_cast<int>(i));
  return ids;
}

json to_json(const GroundTruth& gt) {
  json bubbles = json::array();
  for (const TruthBubble& b : gt.bubbles)
    bubbles.push_back({{"id", b.id},
                       {"release_time_s", b.release_time_s},
                       {"lifetime_s", b.lifetime_s},
                       {"d_eq_mm", b.d_eq_mm},
                       {"volume_mm3", b.volume_mm3},
                       {"rise_velocity_cm_s", b.rise_velocity_cm_s},
                       {"semi_axes", vec(b.semi_axes)},
                       {"orientation", mat(b.orientation)},
                       {"start", vec(b.start)},
                       {"phase", b.phase}});
  json frames = json::array();
  for (const TruthFrame& f : gt.frames) {
    json obs = json::array();
    for (const TruthObservation& o : f.bubbles)
      obs.push_back({{"id", o.bubble_id},
                     {"center", vec(o.ellipsoid.center)},
                     {"orientation", mat(o.ellipsoid.orientation)},
                     {"semi_axes", vec(o.ellipsoid.semi_axes)},
                     {"conic1", mat(o.conic1.matrix())},
                     {"conic2", mat(o.conic2.matrix())}});
    frames.push_back({{"trigger", f.trigger},
                      {"time_s", f.time_s},
                      {"black", f.black},
                      {"cam1", frame_info(f.cam1)},
                      {"cam2", frame_info(f.cam2)},
                      {"bubbles", obs}});
  }
  return {{"frame_rate_hz", gt.frame_rate_hz},
          {"clock_offset_us", gt.clock_offset_us},
          {"width", gt.width},
          {"height", gt.height},
          {"bubbles", bubbles},
          {"frames", frames}};
}

GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth gt;
  try {
    gt.frame_rate_hz = j.at("frame_rate_hz").get<double>();
    gt.clock_offset_us = j.at("clock_offset_us").get<double>();
    gt.width = j.at("width").get<int>();
    gt.height = j.at("height").get<int>();
    for (const json& b : j.at("bubbles")) {
      TruthBubble t;
      t.id = b.at("id").get<int>();
      t.release_time_s = b.at("release_time_s").get<double>();
      t.lifetime_s = b.at("lifetime_s").get<double>();
      t.d_eq_mm = b.at("d_eq_mm").get<double>();
      t.volume_mm3 = b.at("volume_mm3").get<double>();
      t.rise_velocity_cm_s = b.at("rise_velocity_cm_s").get<double>();
      t.semi_axes = vec3(b.at("semi_axes"));
      t.orientation = mat3(b.at("orientation"));
      t.start = vec3(b.at("start"));
      t.phase = b.at("phase").get<double>();
      gt.bubbles.push_back(t);
    }
    for (const json& f : j.at("frames")) {
      TruthFrame t;
      t.trigger = f.at("trigger").get<std::int64_t>();
      t.time_s = f.at("time_s").get<double>();
      t.black = f.at("black").get<bool>();
      for (int cam : {1, 2}) {
        const json& c = f.at(cam == 1 ? "cam1" : "cam2");
        if (c.is_null()) continue;
        FrameInfo info{cam, c.at("index").get<std::int64_t>(), c.at("timestamp_us").get<std::int64_t>()};
        (cam == 1 ? t.cam1 : t.cam2) = info;
      }
      for (const json& o : f.at("bubbles")) {
        TruthObservation obs;
        obs.bubble_id = o.at("id").get<int>();
        obs.ellipsoid = {vec3(o.at("center")), mat3(o.at("orientation")), vec3(o.at("semi_axes"))};
        obs.conic1 = Conicd(mat3(o.at("conic1")));
        obs.conic2 = Conicd(mat3(o.at("conic2")));
        t.bubbles.push_back(obs);
      }
      gt.frames.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("ground truth: ") + e.what());
  }
  return gt;
}

struct Scene::Tables {
  std::vector<Eigen::Vector2f> ideal;  // undistorted position of each subsample, 4 per pixel
  std::vector<float> layer;            // static background: texture and sediment
  std::vector<float> noise;            // standard normal samples
};

struct Scene::Shape {
  Eigen::Matrix3d C;
  Eigen::Vector2d center;
  int c0, r0, c1, r1;
  std::vector<double> jitter;  // cos/sin coefficients of harmonics 2..16, px
  double jitter_bound = 0;
};

Scene::Scene(SceneConfig config) : config_(std::move(config)) {
  config_.validate();
  const SceneConfig& c = config_;
  const StereoRigd pin = c.rig.pinhole();

  if (c.corridor_center) {
    corridor_center_ = *c.corridor_center;
  } else {
    const Eigen::Vector2d mid(0.5 * (c.width - 1), 0.5 * (c.height - 1));
    corridor_center_ = triangulate_midpoint(back_project(c.rig.camera1(), mid), back_project(c.rig.camera2(), mid)).point;
  }

  // Camera-1 heights between which the corridor is seen by some camera.
  double y_low = -INFINITY, y_high = INFINITY;  // below every view / above every view
  const double hw = c.corridor_half_width_mm;
  for (int cam = 1; cam <= 2; ++cam)
    for (double dx : {-hw, hw})
      for (double dz : {-hw, hw}) {
        const double x = corridor_center_.x() + dx, z = corridor_center_.z() + dz;
        if (auto y = y_at_row(pin.camera(cam), x, z, c.height - 0.5, corridor_center_.y())) y_low = std::max(y_low, *y);
        if (auto y = y_at_row(pin.camera(cam), x, z, -0.5, corridor_center_.y())) y_high = std::min(y_high, *y);
      }
  if (!std::isfinite(y_low) || !std::isfinite(y_high)) {
    y_low = corridor_center_.y() + 100;
    y_high = corridor_center_.y() - 100;
  }
  if (y_high > y_low) std::swap(y_high, y_low);

  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> uniform(0, 1);
  std::normal_distribution<double> normal(0, 1);
  std::vector<double> releases;
  if (c.bubble_rate_hz > 0) {
    for (double t = c.first_release_s; t < c.duration_s;) {
      releases.push_back(t);
      t += c.regular_arrivals ? 1.0 / c.bubble_rate_hz : -std::log(1 - uniform(rng)) / c.bubble_rate_hz;
    }
  }
  const double speed = c.rise_velocity_cm_s * 10;  // mm/s, positive upwards (towards -y)
  for (std::size_t i = 0; i < releases.size(); ++i) {
    TruthBubble b;
    b.id = static_cast<int>(i);
    b.release_time_s = releases[i];
    b.d_eq_mm = c.diameters_mm.empty() ? std::exp(c.diameter_log_mean + c.diameter_log_sigma * normal(rng))
                                       : c.diameters_mm[i % c.diameters_mm.size()];
    const double horizontal = 0.5 * b.d_eq_mm * std::cbrt(1.0 / c.aspect_ratio);
    b.semi_axes = Eigen::Vector3d(horizontal, horizontal, c.aspect_ratio * horizontal);
    b.volume_mm3 = M_PI / 6 * b.d_eq_mm * b.d_eq_mm * b.d_eq_mm;
    b.rise_velocity_cm_s = c.rise_velocity_cm_s;
    Eigen::Matrix3d axes;
    axes << 0, 1, 0, 0, 0, 1, 1, 0, 0;  // columns: z, x, y (symmetry axis vertical)
    b.orientation = tilt_rotation(rng, c.tilt_deg) * axes;
    const double r = b.semi_axes.maxCoeff();
    const double room = std::max(0.0, hw - c.helix_radius_mm - r);
    const double x0 = corridor_center_.x() + room * (2 * uniform(rng) - 1);
    const double z0 = corridor_center_.z() + room * (2 * uniform(rng) - 1);
    b.phase = 2 * M_PI * uniform(rng);
    const double margin = r + c.wobble_mm + 1;
    double release = speed >= 0 ? y_low + margin : y_high - margin;
    double exit = speed >= 0 ? y_high - margin : y_low + margin;
    if (c.release_y_mm) release = *c.release_y_mm;
    if (c.exit_y_mm) exit = *c.exit_y_mm;
    b.start = Eigen::Vector3d(x0, release, z0);
    b.lifetime_s = speed != 0 ? std::max(0.0, (release - exit) / speed) : c.duration_s;
    truth_.bubbles.push_back(b);
  }

  truth_.frame_rate_hz = c.frame_rate_hz;
  truth_.clock_offset_us = c.clock_offset_s * 1e6;
  truth_.width = c.width;
  truth_.height = c.height;
  const auto n = static_cast<std::int64_t>(std::llround(c.duration_s * c.frame_rate_hz));
  std::int64_t counter[2] = {c.counter_start1, c.counter_start2};
  for (std::int64_t k = 0; k < n; ++k) {
    TruthFrame f;
    f.trigger = k;
    f.time_s = double(k) / c.frame_rate_hz;
    f.black = k % c.black_interval == c.black_phase;
    for (int cam = 1; cam <= 2; ++cam) {
      const bool dropped = std::any_of(c.drops.begin(), c.drops.end(),
                                       [&](const FrameDrop& d) { return d.camera == cam && d.trigger == k; });
      if (dropped) continue;
      const double jitter = c.timestamp_jitter_us * (2 * unit(mix({c.seed, 0x7157, std::uint64_t(cam), std::uint64_t(k)})) - 1);
      const double t_us = f.time_s * 1e6;
      const std::int64_t stamp =
          cam == 1 ? c.start_time_us + std::llround(t_us + jitter)
                   : c.start_time_us - std::llround(c.clock_offset_s * 1e6) +
                         std::llround(t_us * (1 + c.drift_us_per_s * 1e-6) + jitter);
      (cam == 1 ? f.cam1 : f.cam2) = FrameInfo{cam, counter[cam - 1]++, stamp};
    }
    truth_.frames.push_back(std::move(f));
  }

  for (const TruthBubble& b : truth_.bubbles) {
    const auto first = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(b.release_time_s * c.frame_rate_hz)));
    const auto last = std::min<std::int64_t>(
        n - 1, static_cast<std::int64_t>(std::floor((b.release_time_s + b.lifetime_s) * c.frame_rate_hz)));
    for (std::int64_t k = first; k <= last; ++k) {
      const auto e = bubble_at(b, double(k) / c.frame_rate_hz);
      if (!e) continue;
      TruthObservation o;
      o.bubble_id = b.id;
      o.ellipsoid = *e;
      bool visible = false;
      try {
        o.conic1 = project_ellipsoid(pin.camera1(), *e);
        o.conic2 = project_ellipsoid(pin.camera2(), *e);
        for (const Conicd* conic : {&o.conic1, &o.conic2}) {
          const Ellipse2d el = ellipse_from_conic(*conic);
          const double reach = el.major;
          visible |= el.center.x() + reach > 0 && el.center.x() - reach < c.width && el.center.y() + reach > 0 &&
                     el.center.y() - reach < c.height;
        }
      } catch (const Error&) {
        continue;
      }
      if (visible) truth_.frames[static_cast<std::size_t>(k)].bubbles.push_back(o);
    }
  }
}

Scene::~Scene() = default;

std::optional<Ellipsoidd> Scene::bubble_at(const TruthBubble& b, double t) const {
  const double tau = t - b.release_time_s;
  if (tau < 0 || tau > b.lifetime_s) return std::nullopt;
  const SceneConfig& c = config_;
  const double helix = b.phase + 2 * M_PI * tau / c.helix_period_s;
  Ellipsoidd e;
  e.center = Eigen::Vector3d(b.start.x() + c.helix_radius_mm * std::cos(helix),
                             b.start.y() - c.rise_velocity_cm_s * 10 * tau +
                                 c.wobble_mm * std::sin(2 * M_PI * tau / c.wobble_period_s),
                             b.start.z() + c.helix_radius_mm * std::sin(helix));
  e.orientation = b.orientation;
  e.semi_axes = b.semi_axes;
  return e;
}

const Scene::Tables& Scene::tables(int camera) const {
  std::unique_ptr<Tables>& slot = tables_[camera - 1];
  if (slot) return *slot;
  auto t = std::make_unique<Tables>();
  const SceneConfig& c = config_;
  const Intrinsicsd& in = camera == 1 ? c.rig.cam1 : c.rig.cam2;
  const std::size_t pixels = static_cast<std::size_t>(c.width) * c.height;

  t->ideal.resize(4 * pixels);
  for (int r = 0; r < c.height; ++r)
    for (int col = 0; col < c.width; ++col)
      for (int s = 0; s < 4; ++s) {
        const Eigen::Vector2d raw = Eigen::Vector2d(col, r) + kSubsamples[s];
        t->ideal[4 * (static_cast<std::size_t>(r) * c.width + col) + s] =
            (in.has_distortion() ? undistort_pixel(in, raw) : raw).cast<float>();
      }

  std::mt19937_64 rng(mix({c.seed, 0xBAC6, std::uint64_t(camera)}));
  std::uniform_real_distribution<double> u(0, 1);
  const double ph1 = 2 * M_PI * u(rng), ph2 = 2 * M_PI * u(rng);
  t->layer.resize(pixels);
  for (int r = 0; r < c.height; ++r)
    for (int col = 0; col < c.width; ++col)
      t->layer[static_cast<std::size_t>(r) * c.width + col] = static_cast<float>(
          c.style.background +
          c.texture_amplitude * std::sin(2 * M_PI * col / 211.0 + ph1) * std::cos(2 * M_PI * r / 157.0 + ph2));
  for (int k = 0; k < c.sediment_blobs; ++k) {
    const Eigen::Vector2d centre(u(rng) * c.width, u(rng) * c.height);
    const double radius = 1.5 + 2.5 * u(rng);
    const double value = 60 + 60 * u(rng);
    for (int r = std::max(0, int(centre.y() - radius - 1)); r <= std::min(c.height - 1, int(centre.y() + radius + 1)); ++r)
      for (int col = std::max(0, int(centre.x() - radius - 1)); col <= std::min(c.width - 1, int(centre.x() + radius + 1));
           ++col) {
        int covered = 0;
        for (const auto& s : kSubsamples) covered += ((Eigen::Vector2d(col, r) + s - centre).norm() < radius);
        float& px = t->layer[static_cast<std::size_t>(r) * c.width + col];
        px = static_cast<float>(px + covered / 4.0 * (std::min<double>(value, px) - px));
      }
  }

  std::mt19937_64 noise_rng(mix({c.seed, 0x4015E}));
  std::normal_distribution<float> normal(0, 1);
  t->noise.resize(kNoiseMask + 1);
  for (float& v : t->noise) v = normal(noise_rng);

  slot = std::move(t);
  return *slot;
}

std::vector<Scene::Shape> Scene::shapes(int camera, std::int64_t trigger) const {
  const SceneConfig& c = config_;
  const TruthFrame& f = truth_.frames.at(static_cast<std::size_t>(trigger));
  const Intrinsicsd& in = camera == 1 ? c.rig.cam1 : c.rig.cam2;
  std::vector<Shape> out;
  for (const TruthObservation& o : f.bubbles) {
    const Conicd& conic = camera == 1 ? o.conic1 : o.conic2;
    Ellipse2d el;
    try {
      el = ellipse_from_conic(conic);
    } catch (const Error&) {
      continue;
    }
    Shape s;
    s.C = conic.matrix();
    s.center = el.center;
    if (c.contour_jitter_px > 0) {
      std::mt19937_64 rng(mix({c.seed, 0x717, std::uint64_t(o.bubble_id), std::uint64_t(camera), std::uint64_t(trigger)}));
      std::normal_distribution<double> normal(0, c.contour_jitter_px / std::sqrt(double(kJitterOrders)));
      s.jitter.resize(2 * kJitterOrders);
      for (double& a : s.jitter) {
        a = normal(rng);
        s.jitter_bound += std::abs(a);
      }
    }
    Ellipse2d reach = el;
    reach.major += 2 + s.jitter_bound;
    reach.minor += 2 + s.jitter_bound;
    double u0 = INFINITY, v0 = INFINITY, u1 = -INFINITY, v1 = -INFINITY;
    for (int k = 0; k < 48; ++k) {
      const Eigen::Vector2d p = distort_pixel(in, reach.point_at(2 * M_PI * k / 48));
      u0 = std::min(u0, p.x());
      v0 = std::min(v0, p.y());
      u1 = std::max(u1, p.x());
      v1 = std::max(v1, p.y());
    }
    s.c0 = std::max(0, static_cast<int>(std::floor(u0)) - 2);
    s.r0 = std::max(0, static_cast<int>(std::floor(v0)) - 2);
    s.c1 = std::min(c.width - 1, static_cast<int>(std::ceil(u1)) + 2);
    s.r1 = std::min(c.height - 1, static_cast<int>(std::ceil(v1)) + 2);
    if (s.c0 > s.c1 || s.r0 > s.r1) continue;
    out.push_back(std::move(s));
  }
  return out;
}

double Scene::shade(const Tables& t, const std::vector<Shape>& shapes, int col, int r) const {
  const RenderStyle& style = config_.style;
  const std::size_t p = static_cast<std::size_t>(r) * config_.width + col;
  const double base = t.layer[p];
  double acc = 0;
  for (int k = 0; k < 4; ++k) {
    const Eigen::Vector2d x = t.ideal[4 * p + k].cast<double>();
    double v = base;
    for (const Shape& s : shapes) {
      if (col < s.c0 || col > s.c1 || r < s.r0 || r > s.r1) continue;
      const Eigen::Vector3d Cx = s.C * x.homogeneous();
      const double g = 2 * std::hypot(Cx.x(), Cx.y());
      double d = x.homogeneous().dot(Cx) / g;  // signed distance, negative inside
      if (d > s.jitter_bound) continue;
      if (!s.jitter.empty() && d > -(style.rim_width_px + s.jitter_bound)) {
        const double theta = std::atan2(x.y() - s.center.y(), x.x() - s.center.x());
        double j = 0;
        for (int h = 0; h < kJitterOrders; ++h)
          j += s.jitter[2 * h] * std::cos((h + 2) * theta) + s.jitter[2 * h + 1] * std::sin((h + 2) * theta);
        d -= j;
        if (d > 0) continue;
      }
      v = std::min(v, d > -style.rim_width_px ? style.rim : style.interior);
    }
    acc += v;
  }
  return acc / 4;
}

namespace {

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

Image8 Scene::render(int camera, std::int64_t trigger) const {
  const SceneConfig& c = config_;
  const Tables& t = tables(camera);
  const TruthFrame& f = truth_.frames.at(static_cast<std::size_t>(trigger));
  const std::size_t offset = mix({c.seed, 0x5EED, std::uint64_t(camera), std::uint64_t(trigger)}) & kNoiseMask;
  Image8 img(c.height, c.width);
  std::uint8_t* out = img.data();
  const std::size_t pixels = static_cast<std::size_t>(img.size());
  if (f.black) {
    const double sigma = std::min(c.noise_sigma, 1.0);
    for (std::size_t p = 0; p < pixels; ++p)
      out[p] = quantize(std::clamp(c.style.black + sigma * t.noise[(offset + p) & kNoiseMask], 0.0, 7.0));
    return img;
  }
  for (std::size_t p = 0; p < pixels; ++p) out[p] = quantize(t.layer[p] + c.noise_sigma * t.noise[(offset + p) & kNoiseMask]);
  const std::vector<Shape> all = shapes(camera, trigger);
  for (const Shape& s : all)
    for (int r = s.r0; r <= s.r1; ++r)
      for (int col = s.c0; col <= s.c1; ++col) {
        const std::size_t p = static_cast<std::size_t>(r) * c.width + col;
        out[p] = quantize(shade(t, all, col, r) + c.noise_sigma * t.noise[(offset + p) & kNoiseMask]);
      }
  return img;
}

std::vector<std::uint8_t> Scene::render_pixels(int camera, std::int64_t trigger,
                                               const std::vector<Eigen::Vector2i>& pixels) const {
  const SceneConfig& c = config_;
  const Tables& t = tables(camera);
  const TruthFrame& f = truth_.frames.at(static_cast<std::size_t>(trigger));
  const std::size_t offset = mix({c.seed, 0x5EED, std::uint64_t(camera), std::uint64_t(trigger)}) & kNoiseMask;
  const std::vector<Shape> all = f.black ? std::vector<Shape>{} : shapes(camera, trigger);
  std::vector<std::uint8_t> out;
  out.reserve(pixels.size());
  for (const Eigen::Vector2i& px : pixels) {
    const std::size_t p = static_cast<std::size_t>(px.y()) * c.width + px.x();
    const double n = t.noise[(offset + p) & kNoiseMask];
    if (f.black) {
      out.push_back(quantize(std::clamp(c.style.black + std::min(c.noise_sigma, 1.0) * n, 0.0, 7.0)));
      continue;
    }
    const bool covered = std::any_of(all.begin(), all.end(), [&](const Shape& s) {
      return px.x() >= s.c0 && px.x() <= s.c1 && px.y() >= s.r0 && px.y() <= s.r1;
    });
    out.push_back(quantize((covered ? shade(t, all, px.x(), px.y()) : t.layer[p]) + c.noise_sigma * n));
  }
  return out;
}

SyntheticSequence::SyntheticSequence(const Scene& scene, int camera) : scene_(scene), camera_(camera) {
  if (camera != 1 && camera != 2) throw Error(ErrorCode::InvalidArgument, "camera must be 1 or 2");
  for (const TruthFrame& f : scene.ground_truth().frames) {
    const auto& info = camera == 1 ? f.cam1 : f.cam2;
    if (!info) continue;
    infos_.push_back(*info);
    triggers_.push_back(f.trigger);
  }
}

Image8 SyntheticSequence::load(std::size_t position) const { return scene_.render(camera_, triggers_.at(position)); }

std::vector<std::uint8_t> SyntheticSequence::diagonals(std::size_t position) const {
  return scene_.render_pixels(camera_, triggers_.at(position), diagonal_samples(width(), height()));
}

GroundTruth generate(const SceneConfig& config, const fs::path& out) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)))
    throw Error(ErrorCode::Io, "output directory is not empty: " + out.string());
  const Scene scene(config);
  std::error_code ec;
  fs::create_directories(out / "cam1", ec);
  fs::create_directories(out / "cam2", ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + out.string() + ": " + ec.message());
  for (const TruthFrame& f : scene.ground_truth().frames) {
    if (f.cam1) write_pgm(out / "cam1" / frame_filename(*f.cam1), scene.render(1, f.trigger));
    if (f.cam2) write_pgm(out / "cam2" / frame_filename(*f.cam2), scene.render(2, f.trigger));
  }
  save_calibration(out / "calibration.json", CalibrationFile{config.rig, false});
  std::ofstream gt(out / "ground_truth.json");
  gt << to_json(scene.ground_truth()).dump() << '\n';
  std::ofstream sc(out / "scene.json");
  sc << to_json(config).dump(2) << '\n';
  if (!gt || !sc) throw Error(ErrorCode::Io, "cannot write ground truth to " + out.string());
  return scene.ground_truth();
}

StereoRigd perturb_rig(const StereoRigd& rig, const Eigen::Vector3d& rot_deg, const Eigen::Vector3d& t_dir_mm) {
  const Eigen::Vector3d a = rot_deg * (M_PI / 180);
  const Eigen::Matrix3d Rd = (Eigen::AngleAxisd(a.z(), Eigen::Vector3d::UnitZ()) *
                              Eigen::AngleAxisd(a.y(), Eigen::Vector3d::UnitY()) *
                              Eigen::AngleAxisd(a.x(), Eigen::Vector3d::UnitX()))
                                 .toRotationMatrix();
  StereoRigd out = rig;
  if (!rot_deg.isZero()) out.pose2.rotation = Rd * rig.pose2.rotation;
  if (!t_dir_mm.isZero())
    out.pose2.translation = rig.pose2.translation.norm() * (rig.pose2.translation + t_dir_mm).normalized();
  return out;
}

}  // namespace bubblestream
