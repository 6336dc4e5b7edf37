#include "bubblestream/detection.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace bubblestream {

namespace {

using ImageF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

ImageF gaussian_blur(const ImageF& in, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<float> k(2 * radius + 1);
  float sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(float(-0.5 * i * i / (sigma * sigma)));
  for (float& v : k) v /= sum;
  const int rows = static_cast<int>(in.rows()), cols = static_cast<int>(in.cols());
  ImageF tmp(rows, cols), out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * in(r, std::clamp(c + i, 0, cols - 1));
      tmp(r, c) = acc;
    }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(std::clamp(r + i, 0, rows - 1), c);
      out(r, c) = acc;
    }
  return out;
}

// Threshold maximizing the between-class variance of a 256-bin histogram
// spanning [0, max].
double otsu(const ImageF& mag, float max_value) {
  if (!(max_value > 0)) return 0;
  std::array<double, 256> hist{};
  const float scale = 255.0f / max_value;
  for (Eigen::Index p = 0; p < mag.size(); ++p) hist[std::min(255, static_cast<int>(mag.data()[p] * scale))] += 1;
  const double total = double(mag.size());
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best = -1;
  int best_bin = 0;
  for (int i = 0; i < 256; ++i) {
    w0 += hist[i];
    sum0 += i * hist[i];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = i;
    }
  }
  return (best_bin + 1) / double(scale);
}

float bilinear(const ImageF& img, double x, double y) {
  const int cols = static_cast<int>(img.cols()), rows = static_cast<int>(img.rows());
  x = std::clamp(x, 0.0, cols - 1.0);
  y = std::clamp(y, 0.0, rows - 1.0);
  const int x0 = std::min(static_cast<int>(x), cols - 2 < 0 ? 0 : cols - 2);
  const int y0 = std::min(static_cast<int>(y), rows - 2 < 0 ? 0 : rows - 2);
  const int x1 = std::min(x0 + 1, cols - 1), y1 = std::min(y0 + 1, rows - 1);
  const float fx = float(x - x0), fy = float(y - y0);
  const float top = img(y0, x0) + fx * (img(y0, x1) - img(y0, x0));
  const float bottom = img(y1, x0) + fx * (img(y1, x1) - img(y1, x0));
  return top + fy * (bottom - top);
}

double cross(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

double point_segment_distance(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).norm();
}

bool segments_cross(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c,
                    const Eigen::Vector2d& d) {
  const double d1 = cross(a, b, c), d2 = cross(a, b, d), d3 = cross(c, d, a), d4 = cross(c, d, b);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
}

// Inside or on the boundary of a counter-clockwise convex polygon.
bool inside(const std::vector<Eigen::Vector2d>& poly, const Eigen::Vector2d& p) {
  if (poly.size() < 3) return false;
  for (std::size_t i = 0; i < poly.size(); ++i)
    if (cross(poly[i], poly[(i + 1) % poly.size()], p) < 0) return false;
  return true;
}

double boundary_distance(const std::vector<Eigen::Vector2d>& poly, const Eigen::Vector2d& p) {
  if (poly.size() == 1) return (poly[0] - p).norm();
  double d = INFINITY;
  for (std::size_t i = 0; i < poly.size(); ++i)
    d = std::min(d, point_segment_distance(p, poly[i], poly[(i + 1) % poly.size()]));
  return d;
}

double perimeter(const std::vector<Eigen::Vector2d>& poly) {
  if (poly.size() < 2) return 0;
  double len = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) len += (poly[(i + 1) % poly.size()] - poly[i]).norm();
  return len;
}

struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

EdgeMap canny(const Image8& image, const DetectionParams& params) {
  EdgeMap edges;
  const int rows = static_cast<int>(image.rows()), cols = static_cast<int>(image.cols());
  if (rows < 3 || cols < 3) return edges;
  ImageF src = image.cast<float>();
  if (params.gaussian_sigma > 0) src = gaussian_blur(src, params.gaussian_sigma);

  auto sobel = [&](int r, int c) {
    const float* up = &src(r - 1, c);
    const float* mid = &src(r, c);
    const float* down = &src(r + 1, c);
    const float x = (up[1] + 2 * mid[1] + down[1] - up[-1] - 2 * mid[-1] - down[-1]) * 0.125f;
    const float y = (down[-1] + 2 * down[0] + down[1] - up[-1] - 2 * up[0] - up[1]) * 0.125f;
    return Eigen::Vector2f(x, y);
  };
  ImageF mag = ImageF::Zero(rows, cols);
  float max_mag = 0;
  for (int r = 1; r < rows - 1; ++r)
    for (int c = 1; c < cols - 1; ++c) {
      const float m = sobel(r, c).norm();
      mag(r, c) = m;
      max_mag = std::max(max_mag, m);
    }

  edges.high = params.high_threshold > 0 ? params.high_threshold : std::max(otsu(mag, max_mag), params.high_floor);
  edges.low = params.low_ratio * edges.high;

  // Non-maximum suppression along the interpolated gradient direction, with
  // a parabolic peak fit for the subpixel position.
  struct Candidate {
    Eigen::Vector2d point;
    int pixel;
    bool strong;
  };
  std::vector<Candidate> candidates;
  std::vector<std::int32_t> slot(static_cast<std::size_t>(rows) * cols, -1);
  const float low = static_cast<float>(edges.low);
  for (int r = 1; r < rows - 1; ++r)
    for (int c = 1; c < cols - 1; ++c) {
      const float m = mag(r, c);
      if (m < low || m <= 0) continue;
      const Eigen::Vector2f g = sobel(r, c) / m;
      const float ahead = bilinear(mag, c + g.x(), r + g.y());
      const float behind = bilinear(mag, c - g.x(), r - g.y());
      if (!(m > behind && m >= ahead)) continue;
      const double denom = behind - 2.0 * m + ahead;
      const double offset = denom < 0 ? std::clamp(0.5 * (behind - ahead) / denom, -0.5, 0.5) : 0.0;
      const int p = r * cols + c;
      slot[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(candidates.size());
      candidates.push_back({Eigen::Vector2d(c + offset * g.x(), r + offset * g.y()), p, m >= edges.high});
    }

  // Hysteresis and 8-connected grouping in one flood fill from strong edgels.
  std::vector<int> label(candidates.size(), -1);
  std::vector<std::int32_t> stack;
  for (std::size_t seed = 0; seed < candidates.size(); ++seed) {
    if (!candidates[seed].strong || label[seed] >= 0) continue;
    const int id = edges.groups++;
    label[seed] = id;
    stack.push_back(static_cast<std::int32_t>(seed));
    while (!stack.empty()) {
      const Candidate& e = candidates[static_cast<std::size_t>(stack.back())];
      stack.pop_back();
      const int r = e.pixel / cols, c = e.pixel % cols;
      edges.points.push_back(e.point);
      edges.pixels.emplace_back(c, r);
      edges.group.push_back(id);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const std::int32_t q = slot[static_cast<std::size_t>((r + dr) * cols + (c + dc))];
          if (q >= 0 && label[static_cast<std::size_t>(q)] < 0) {
            label[static_cast<std::size_t>(q)] = id;
            stack.push_back(q);
          }
        }
    }
  }
  return edges;
}

std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

double polygon_distance(const std::vector<Eigen::Vector2d>& a, const std::vector<Eigen::Vector2d>& b) {
  if (a.empty() || b.empty()) return INFINITY;
  if (inside(a, b.front()) || inside(b, a.front())) return 0;
  double d = INFINITY;
  const std::size_t na = a.size(), nb = b.size();
  for (std::size_t i = 0; i < na; ++i) {
    const Eigen::Vector2d &p0 = a[i], &p1 = a[(i + 1) % na];
    for (std::size_t j = 0; j < nb; ++j) {
      const Eigen::Vector2d &q0 = b[j], &q1 = b[(j + 1) % nb];
      if (segments_cross(p0, p1, q0, q1)) return 0;
      d = std::min({d, point_segment_distance(p0, q0, q1), point_segment_distance(q0, p0, p1)});
    }
  }
  return d;
}

std::vector<BubbleDetection> detect_bubbles(const Image8& foreground, const DetectionParams& params,
                                            std::int64_t frame_index, int camera_id, const Intrinsicsd* lens) {
  EdgeMap edges = canny(foreground, params);
  if (lens && lens->has_distortion())
    for (Eigen::Vector2d& p : edges.points) p = undistort_pixel(*lens, p);
  std::vector<std::vector<Eigen::Vector2d>> members(edges.groups);
  std::vector<char> at_border(edges.groups, 0);
  const int margin = static_cast<int>(std::ceil(params.border_margin_px));
  const int w = static_cast<int>(foreground.cols()), h = static_cast<int>(foreground.rows());
  for (std::size_t k = 0; k < edges.points.size(); ++k) {
    members[edges.group[k]].push_back(edges.points[k]);
    const Eigen::Vector2i& q = edges.pixels[k];
    if (q.x() < margin || q.y() < margin || q.x() >= w - margin || q.y() >= h - margin) at_border[edges.group[k]] = 1;
  }

  std::vector<std::vector<Eigen::Vector2d>> hulls(edges.groups);
  std::vector<Box> boxes(edges.groups);
  for (int g = 0; g < edges.groups; ++g) {
    hulls[g] = convex_hull(members[g]);
    Box b{INFINITY, INFINITY, -INFINITY, -INFINITY};
    for (const auto& p : members[g]) {
      b.u0 = std::min(b.u0, p.x());
      b.v0 = std::min(b.v0, p.y());
      b.u1 = std::max(b.u1, p.x());
      b.v1 = std::max(b.v1, p.y());
    }
    boxes[g] = b;
  }

  DisjointSets sets(edges.groups);
  const double gap = params.merge_gap_px;
  for (int a = 0; a < edges.groups; ++a)
    for (int b = a + 1; b < edges.groups; ++b) {
      const Box &ba = boxes[a], &bb = boxes[b];
      if (ba.u0 > bb.u1 + gap || bb.u0 > ba.u1 + gap || ba.v0 > bb.v1 + gap || bb.v0 > ba.v1 + gap) continue;
      if (sets.find(a) == sets.find(b)) continue;
      if (polygon_distance(hulls[a], hulls[b]) < gap) sets.unite(a, b);
    }

  std::vector<std::vector<int>> clusters(edges.groups);
  for (int g = 0; g < edges.groups; ++g) clusters[sets.find(g)].push_back(g);

  std::vector<BubbleDetection> out;
  for (const auto& cluster : clusters) {
    if (cluster.empty()) continue;
    std::vector<Eigen::Vector2d> points;
    Box box{INFINITY, INFINITY, -INFINITY, -INFINITY};
    bool truncated = false;
    for (int g : cluster) {
      truncated = truncated || at_border[g];
      points.insert(points.end(), members[g].begin(), members[g].end());
      box.u0 = std::min(box.u0, boxes[g].u0);
      box.v0 = std::min(box.v0, boxes[g].v0);
      box.u1 = std::max(box.u1, boxes[g].u1);
      box.v1 = std::max(box.v1, boxes[g].v1);
    }
    const std::vector<Eigen::Vector2d> hull = cluster.size() == 1 ? hulls[cluster.front()] : convex_hull(points);
    const double length = perimeter(hull);
    if (hull.size() < 3 || length < params.min_contour_px) continue;

    std::vector<Eigen::Vector2d> outline;
    for (const auto& p : points)
      if (boundary_distance(hull, p) <= params.hull_band_px) outline.push_back(p);
    std::optional<Conicd> conic = fit_ellipse(outline);
    if (!conic) {
      outline = hull;
      conic = fit_ellipse(outline);
    }
    if (!conic || !conic->is_ellipse()) continue;

    BubbleDetection det;
    det.ellipse = ellipse_from_conic(*conic);
    if (!(det.ellipse.minor > 0) || !std::isfinite(det.ellipse.major)) continue;
    det.fit_rms = rms_sampson(*conic, outline);
    det.merged = det.fit_rms > params.merged_rms_px;
    det.truncated = truncated;
    det.bbox = box;
    det.contour_length = length;
    det.frame_index = frame_index;
    det.camera_id = camera_id;
    const Eigen::Vector2d c = det.ellipse.center;
    std::sort(outline.begin(), outline.end(), [&](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
      return std::atan2(a.y() - c.y(), a.x() - c.x()) < std::atan2(b.y() - c.y(), b.x() - c.x());
    });
    det.contour = std::move(outline);
    out.push_back(std::move(det));
  }
  std::sort(out.begin(), out.end(), [](const BubbleDetection& a, const BubbleDetection& b) {
    const Eigen::Vector2d &p = a.ellipse.center, &q = b.ellipse.center;
    return p.y() != q.y() ? p.y() < q.y() : p.x() < q.x();
  });
  return out;
}

nlohmann::json to_json(const BubbleDetection& d) {
  return {{"frame_index", d.frame_index},
          {"camera_id", d.camera_id},
          {"ellipse",
           {{"u", d.ellipse.center.x()},
            {"v", d.ellipse.center.y()},
            {"A", d.ellipse.major},
            {"B", d.ellipse.minor},
            {"theta", d.ellipse.angle}}},
          {"bbox", {d.bbox.u0, d.bbox.v0, d.bbox.u1, d.bbox.v1}},
          {"contour_len", d.contour_length},
          {"fit_rms", d.fit_rms},
          {"merged", d.merged},
          {"truncated", d.truncated}};
}

}  // namespace bubblestream
