#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "bubblestream/background.hpp"
#include "bubblestream/calibration_io.hpp"
#include "bubblestream/detection.hpp"
#include "bubblestream/image.hpp"
#include "bubblestream/synchronization.hpp"

using namespace bubblestream;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bubblestream_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image8 random_image(std::mt19937_64& rng, int w, int h, int lo = 0, int hi = 255) {
  std::uniform_int_distribution<int> v(lo, hi);
  Image8 img(h, w);
  for (Eigen::Index p = 0; p < img.size(); ++p) img.data()[p] = static_cast<std::uint8_t>(v(rng));
  return img;
}

// Dark rim of width `rim` just inside the ellipse outline, 4x4 supersampled.
void draw_bubble(Image8& img, const Ellipse2d& e, double rim = 2.0, double interior = 170, double rim_value = 20) {
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  for (int r = 0; r < img.rows(); ++r)
    for (int col = 0; col < img.cols(); ++col) {
      double sum = 0;
      bool touched = false;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          const double x = col - 0.375 + 0.25 * b - e.center.x(), y = r - 0.375 + 0.25 * a - e.center.y();
          const double xl = c * x + s * y, yl = -s * x + c * y;
          const double rho = std::hypot(xl / e.major, yl / e.minor);
          const double depth = rho > 0 ? std::hypot(x, y) * (1 / rho - 1) : 1e9;  // along the ray
          double v = img(r, col);
          if (rho <= 1) {
            v = depth < rim ? rim_value : interior;
            touched = true;
          }
          sum += v;
        }
      if (touched) img(r, col) = static_cast<std::uint8_t>(std::lround(sum / 16));
    }
}

Image8 flat(int w, int h, std::uint8_t v) { return Image8::Constant(h, w, v); }

std::vector<FrameInfo> clock(int camera, int n, double start_us, double interval_us, std::int64_t counter = 0) {
  std::vector<FrameInfo> out;
  for (int k = 0; k < n; ++k) out.push_back({camera, counter + k, std::llround(start_us + k * interval_us)});
  return out;
}

}  // namespace

TEST_CASE("frame file names") {
  const FrameInfo info{2, 42, 1600000000012345};
  CHECK(frame_filename(info) == "2_00000042_1600000000012345.pgm");
  const auto back = parse_frame_filename(frame_filename(info));
  REQUIRE(back.has_value());
  CHECK(back->camera_id == 2);
  CHECK(back->index == 42);
  CHECK(back->timestamp_us == 1600000000012345);
  CHECK_FALSE(parse_frame_filename("2_42_1600000000012345.pgm").has_value());
  CHECK_FALSE(parse_frame_filename("2_00000042_1600000000012345.png").has_value());
  CHECK_FALSE(parse_frame_filename("x_00000042_1600000000012345.pgm").has_value());
}

TEST_CASE("pgm round trip and diagonal reads") {
  TempDir dir("pgm");
  std::mt19937_64 rng(1);
  const Image8 img = random_image(rng, 37, 23);
  write_pgm(dir.path / "a.pgm", img);
  CHECK(read_pgm(dir.path / "a.pgm") == img);

  const auto samples = diagonal_samples(37, 23);
  REQUIRE(samples.size() == 46);
  CHECK(samples.front() == Eigen::Vector2i(0, 0));
  const auto diag = read_pgm_diagonals(dir.path / "a.pgm");
  REQUIRE(diag.size() == samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) CHECK(diag[k] == img(samples[k].y(), samples[k].x()));
  for (const auto& p : samples) {
    CHECK(p.x() >= 0);
    CHECK(p.x() < 37);
  }

  SUBCASE("header comments") {
    std::ofstream out(dir.path / "c.pgm", std::ios::binary);
    out << "P5\n# comment\n3 2\n# another\n255\n";
    const char px[6] = {1, 2, 3, 4, 5, 6};
    out.write(px, 6);
    out.close();
    const Image8 c = read_pgm(dir.path / "c.pgm");
    CHECK(c.cols() == 3);
    CHECK(c(1, 2) == 6);
  }
  SUBCASE("16-bit and truncated files are rejected") {
    std::ofstream(dir.path / "d.pgm", std::ios::binary) << "P5\n2 2\n65535\n";
    CHECK_THROWS_AS(read_pgm(dir.path / "d.pgm"), Error);
    std::ofstream(dir.path / "e.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
    CHECK_THROWS_AS(read_pgm(dir.path / "e.pgm"), Error);
  }
}

TEST_CASE("pgm directory source") {
  TempDir dir("source");
  const Image8 img = flat(8, 6, 100);
  // Written out of order and mixed with the other camera.
  write_pgm(dir.path / frame_filename({1, 5, 3000}), img);
  write_pgm(dir.path / frame_filename({1, 4, 1000}), img);
  write_pgm(dir.path / frame_filename({2, 9, 2000}), img);
  write_pgm(dir.path / "notes.txt", img);
  PgmDirectorySource s(dir.path, 1);
  REQUIRE(s.size() == 2);
  CHECK(s.frames()[0].timestamp_us == 1000);
  CHECK(s.frames()[1].index == 5);
  CHECK(s.width() == 8);
  CHECK(s.load(1) == img);
  CHECK_THROWS_AS(PgmDirectorySource(dir.path, 3), Error);
}

TEST_CASE("black frames") {
  std::vector<std::uint8_t> v(20, 7);
  CHECK(is_black_frame(v));
  v[13] = 8;
  CHECK_FALSE(is_black_frame(v));
  CHECK(is_black_frame(v, 9));

  std::mt19937_64 rng(2);
  std::vector<Frame> frames;
  for (int k = 0; k < 6; ++k)
    frames.push_back({k == 2 || k == 5 ? random_image(rng, 16, 12, 0, 7) : random_image(rng, 16, 12, 0, 255),
                      {1, k, 1000 * k}});
  // A bright frame that is dark only off the diagonals is not black.
  frames[3].pixels.setConstant(0);
  frames[3].pixels(6, 0) = 200;
  frames[3].pixels(6, 15) = 200;
  for (const auto& p : diagonal_samples(16, 12)) frames[3].pixels(p.y(), p.x()) = 0;
  frames[3].pixels(0, 0) = 9;
  const MemorySource src(frames);
  CHECK(detect_black_frames(src) == std::vector<std::size_t>{2, 5});
}

TEST_CASE("synchronize") {
  const double dt = 12500;
  const double offset = 2.7e6;  // camera 1 clock ahead by 2.7 s
  auto seq1 = clock(1, 400, 1.6e15, dt);
  // Camera 2 runs slightly fast and starts 3 frames later.
  std::vector<FrameInfo> seq2;
  for (int k = 3; k < 400; ++k)
    seq2.push_back({2, k - 3, std::llround(1.6e15 - offset + k * dt * (1 + 3e-6))});
  std::vector<std::size_t> black1, black2;
  for (std::size_t k = 10; k < 400; k += 100) black1.push_back(k);
  for (std::size_t k = 7; k < seq2.size(); k += 100) black2.push_back(k);

  SUBCASE("offset, pairing and interval") {
    const SyncResult r = synchronize(seq1, black1, seq2, black2);
    // Camera 2 gains 15 us over the sequence; the estimate averages it.
    CHECK(std::abs(r.offset_us - offset) < 20);
    CHECK(r.frame_interval_us == doctest::Approx(dt).epsilon(1e-4));
    REQUIRE(r.pairs.size() == 397);
    for (const FramePair& p : r.pairs) CHECK(p.pos1 == p.pos2 + 3);
    CHECK(r.drops.empty());
    CHECK(r.black_pairs.size() == 4);
    CHECK(r.counter_jumps.empty());
    int black = 0;
    for (const FramePair& p : r.pairs) black += p.black;
    CHECK(black == 4);
  }
  SUBCASE("swapping the sequences negates the offset") {
    const SyncResult a = synchronize(seq1, black1, seq2, black2);
    const SyncResult b = synchronize(seq2, black2, seq1, black1);
    CHECK(b.offset_us == doctest::Approx(-a.offset_us).epsilon(1e-12));
    REQUIRE(a.pairs.size() == b.pairs.size());
    for (std::size_t k = 0; k < a.pairs.size(); ++k) {
      CHECK(a.pairs[k].pos1 == b.pairs[k].pos2);
      CHECK(a.pairs[k].pos2 == b.pairs[k].pos1);
    }
  }
  SUBCASE("a dropped frame is reported and shifts the counter") {
    // Camera 2 never saved the exposure of trigger 150; its counter then
    // lags camera 1 by one more.
    std::vector<FrameInfo> dropped;
    for (const FrameInfo& f : seq2)
      if (f.index != 147) dropped.push_back({2, f.index < 147 ? f.index : f.index - 1, f.timestamp_us});
    std::vector<std::size_t> black;
    for (std::size_t p : black2) black.push_back(p > 147 ? p - 1 : p);
    const SyncResult r = synchronize(seq1, black1, dropped, black);
    REQUIRE(r.drops.size() == 1);
    CHECK(r.drops[0].lost_camera == 2);
    CHECK(r.drops[0].partner_index == 150);
    CHECK(std::abs(r.drops[0].expected_timestamp_us - seq2[147].timestamp_us) < 20);
    CHECK(r.pairs.size() == 396);
    for (const FramePair& p : r.pairs)
      CHECK(std::abs(seq1[p.pos1].timestamp_us - dropped[p.pos2].timestamp_us - offset) < 20);
    REQUIRE(r.counter_jumps.size() == 1);
    CHECK(r.counter_jumps[0].difference_change == 1);
  }
  SUBCASE("no black frame") {
    CHECK_THROWS_AS(synchronize(seq1, {}, seq2, black2), Error);
    try {
      synchronize(seq1, black1, seq2, {});
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Unsynchronizable);
    }
  }
}

TEST_CASE("sliding median matches a full sort") {
  std::mt19937_64 rng(9);
  const int w = 7, h = 5;
  for (int window : {1, 4, 5, 31}) {
    SlidingMedian m(w, h);
    std::deque<Image8> frames;
    for (int step = 0; step < 80; ++step) {
      // Mostly a narrow band with occasional outliers, like a background.
      Image8 f = step % 7 == 3 ? random_image(rng, w, h) : random_image(rng, w, h, 100, 110);
      frames.push_back(f);
      if (static_cast<int>(frames.size()) > window) {
        m.replace(frames.back().data(), frames.front().data());
        frames.pop_front();
      } else {
        m.add(frames.back().data());
      }
      const Image8 got = m.median();
      const Image8 expected = median_background(std::vector<Image8>(frames.begin(), frames.end()));
      CHECK(got == expected);
    }
    while (frames.size() > 1) {
      m.remove(frames.front().data());
      frames.pop_front();
      CHECK(m.median() == median_background(std::vector<Image8>(frames.begin(), frames.end())));
    }
  }
  SlidingMedian empty(3, 3);
  CHECK_THROWS_AS(empty.median(), Error);
}

TEST_CASE("median_background picks the lower middle") {
  std::vector<Image8> window{flat(2, 2, 9), flat(2, 2, 1), flat(2, 2, 5), flat(2, 2, 7)};
  CHECK(median_background(window) == flat(2, 2, 5));
  window.pop_back();
  CHECK(median_background(window) == flat(2, 2, 5));
  CHECK_THROWS_AS(median_background(std::vector<Image8>{}), Error);
  window.push_back(flat(3, 2, 0));
  CHECK_THROWS_AS(median_background(window), Error);
}

TEST_CASE("background removal") {
  Image8 frame = flat(4, 3, 100), bg = flat(4, 3, 120);
  frame(1, 2) = 200;
  const Image8 d = absolute_difference(frame, bg);
  CHECK(d(0, 0) == 20);
  CHECK(d(1, 2) == 80);
  CHECK_THROWS_AS(absolute_difference(frame, flat(3, 3, 0)), Error);

  SUBCASE("pinhole intrinsics leave the difference unchanged") {
    Intrinsicsd pin{500, 500, 2, 1.5};
    CHECK(remove_background(frame, bg, pin) == d);
    CHECK(UndistortionMap(pin, 4, 3).identity());
  }
  SUBCASE("distortion resamples bilinearly") {
    std::mt19937_64 rng(4);
    const Intrinsicsd lens = reference_rig().cam1;
    const int w = 1024, h = 800;
    const Image8 raw = random_image(rng, w, h);
    const Image8 out = UndistortionMap(lens, w, h).apply(raw);
    std::uniform_int_distribution<int> u(0, w - 1), v(0, h - 1);
    for (int k = 0; k < 500; ++k) {
      const int c = u(rng), r = v(rng);
      const Eigen::Vector2d src = distort_pixel(lens, Eigen::Vector2d(c, r));
      if (src.x() < 0 || src.y() < 0 || src.x() > w - 1 || src.y() > h - 1) {
        CHECK(out(r, c) == 0);
        continue;
      }
      const int x0 = std::min(int(src.x()), w - 2), y0 = std::min(int(src.y()), h - 2);
      const double fx = src.x() - x0, fy = src.y() - y0;
      const double expected = (1 - fx) * (1 - fy) * raw(y0, x0) + fx * (1 - fy) * raw(y0, x0 + 1) +
                              (1 - fx) * fy * raw(y0 + 1, x0) + fx * fy * raw(y0 + 1, x0 + 1);
      CHECK(std::abs(out(r, c) - expected) <= 1.0);
    }
  }
}

TEST_CASE("background stream") {
  std::mt19937_64 rng(6);
  const int w = 6, h = 4, n = 23, window = 5;
  std::vector<Frame> frames;
  for (int k = 0; k < n; ++k) frames.push_back({random_image(rng, w, h), {1, k, 1000 * k}});
  const MemorySource src(frames);
  const std::vector<std::size_t> skip{4, 11};
  std::vector<std::size_t> order;
  for (int k = 0; k < n; ++k)
    if (k != 4 && k != 11) order.push_back(k);

  BackgroundStream stream(src, window, skip);
  std::size_t pos = 0;
  Image8 fg;
  std::size_t i = 0;
  while (stream.next(pos, fg)) {
    REQUIRE(i < order.size());
    CHECK(pos == order[i]);
    const std::size_t m = order.size();
    const std::size_t start = std::min(i > window / 2 ? i - window / 2 : 0, m - window);
    std::vector<Image8> win;
    for (std::size_t k = start; k < start + window; ++k) win.push_back(frames[order[k]].pixels);
    CHECK(fg == absolute_difference(frames[pos].pixels, median_background(win)));
    ++i;
  }
  CHECK(i == order.size());
  CHECK_THROWS_AS(BackgroundStream(src, 4), Error);

  SUBCASE("window longer than the sequence") {
    BackgroundStream all(src, 101);
    std::vector<Image8> everything;
    for (const Frame& f : frames) everything.push_back(f.pixels);
    const Image8 median = median_background(everything);
    while (all.next(pos, fg)) CHECK(fg == absolute_difference(frames[pos].pixels, median));
  }
}

TEST_CASE("canny, hull and polygon distance helpers") {
  std::vector<Eigen::Vector2d> pts{{0, 0}, {4, 0}, {4, 4}, {0, 4}, {2, 2}, {1, 3}, {2, 0}};
  const auto hull = convex_hull(pts);
  CHECK(hull.size() == 4);
  double area = 0;
  for (std::size_t k = 0; k < hull.size(); ++k) {
    const auto& a = hull[k];
    const auto& b = hull[(k + 1) % hull.size()];
    area += a.x() * b.y() - a.y() * b.x();
  }
  CHECK(area / 2 == doctest::Approx(16));  // counter-clockwise

  std::vector<Eigen::Vector2d> shifted;
  for (const auto& p : hull) shifted.push_back(p + Eigen::Vector2d(7, 0));
  CHECK(polygon_distance(hull, shifted) == doctest::Approx(3));
  std::vector<Eigen::Vector2d> inner{{1, 1}, {2, 1}, {2, 2}};
  CHECK(polygon_distance(hull, inner) == 0.0);
  std::vector<Eigen::Vector2d> crossing{{3, -1}, {6, -1}, {6, 2}};
  CHECK(polygon_distance(hull, crossing) == 0.0);

  Image8 step = flat(20, 10, 0);
  step.rightCols(10).setConstant(100);
  const EdgeMap e = canny(step);
  REQUIRE(!e.points.empty());
  for (const auto& p : e.points) CHECK(std::abs(p.x() - 9.5) < 0.3);
  CHECK(e.groups == 1);
}

TEST_CASE("bubble detection") {
  const Image8 bg = flat(400, 300, 200);
  Ellipse2d truth;
  truth.center = {200.3, 150.7};
  truth.major = 17;
  truth.minor = 14;
  truth.angle = 0.3;

  SUBCASE("one ellipse") {
    Image8 img = bg;
    draw_bubble(img, truth);
    const auto dets = detect_bubbles(absolute_difference(img, bg), {}, 12, 2);
    REQUIRE(dets.size() == 1);
    const BubbleDetection& d = dets[0];
    CHECK((d.ellipse.center - truth.center).norm() < 0.1);
    CHECK(std::abs(d.ellipse.major - truth.major) < 0.2);
    CHECK(std::abs(d.ellipse.minor - truth.minor) < 0.2);
    CHECK(std::abs(d.ellipse.angle - truth.angle) < 0.02);
    CHECK_FALSE(d.merged);
    CHECK_FALSE(d.truncated);
    CHECK(d.frame_index == 12);
    CHECK(d.camera_id == 2);
    CHECK(d.contour.size() > 50);
    CHECK(d.bbox.contains(truth.center));
    CHECK(d.contour_length == doctest::Approx(2 * M_PI * std::sqrt(0.5 * (17 * 17 + 14 * 14))).epsilon(0.03));
    const auto j = to_json(d);
    CHECK(j["ellipse"]["A"].get<double>() == d.ellipse.major);
    CHECK(j["bbox"].size() == 4);
  }
  SUBCASE("specks are rejected") {
    Image8 img = bg;
    Ellipse2d speck = truth;
    speck.major = speck.minor = 2.5;
    draw_bubble(img, speck, 1.0);
    CHECK(detect_bubbles(absolute_difference(img, bg)).empty());
  }
  SUBCASE("separate and touching bubbles") {
    Image8 img = bg;
    Ellipse2d other = truth;
    other.center.x() += 60;
    draw_bubble(img, truth);
    draw_bubble(img, other);
    CHECK(detect_bubbles(absolute_difference(img, bg)).size() == 2);

    Image8 touching = bg;
    other.center.x() = truth.center.x() + 30;
    draw_bubble(touching, truth);
    draw_bubble(touching, other);
    const auto dets = detect_bubbles(absolute_difference(touching, bg));
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].merged);
  }
  SUBCASE("outline cut by the border") {
    Image8 img = bg;
    Ellipse2d edge = truth;
    edge.center = {8, 150};
    draw_bubble(img, edge);
    const auto dets = detect_bubbles(absolute_difference(img, bg));
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].truncated);
  }
  SUBCASE("undistorted edgels follow the lens model") {
    const Intrinsicsd lens = reference_rig().cam1;
    Image8 img = flat(1024, 800, 200);
    Ellipse2d raw = truth;
    raw.center = {850, 650};
    draw_bubble(img, raw);
    const auto plain = detect_bubbles(absolute_difference(img, flat(1024, 800, 200)));
    const auto ideal = detect_bubbles(absolute_difference(img, flat(1024, 800, 200)), {}, 0, 1, &lens);
    REQUIRE(plain.size() == 1);
    REQUIRE(ideal.size() == 1);
    const Eigen::Vector2d expected = undistort_pixel(lens, plain[0].ellipse.center);
    CHECK((ideal[0].ellipse.center - expected).norm() < 0.05);
  }
}
