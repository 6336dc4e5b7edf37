#pragma once

// Bubble outlines in a foreground image: Canny edges, connected edge groups,
// convex hulls, hull merging and an ellipse fit per merged group.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "bubblestream/conic.hpp"
#include "bubblestream/geometry.hpp"
#include "bubblestream/image.hpp"

namespace bubblestream {

/// Axis-aligned rectangle in pixels, (u0, v0) top-left.
struct Box {
  double u0 = 0, v0 = 0, u1 = 0, v1 = 0;

  double width() const { return u1 - u0; }
  double height() const { return v1 - v0; }
  double area() const { return width() * height(); }
  Eigen::Vector2d center() const { return {0.5 * (u0 + u1), 0.5 * (v0 + v1)}; }
  bool contains(const Eigen::Vector2d& p) const { return p.x() >= u0 && p.x() <= u1 && p.y() >= v0 && p.y() <= v1; }
};

struct BubbleDetection {
  std::vector<Eigen::Vector2d> contour;  // outline edgels, ordered by angle about the centre
  Ellipse2d ellipse;
  Box bbox;                              // bounds of all edgels of the group
  double contour_length = 0;             // hull perimeter, px
  double fit_rms = 0;                    // Sampson RMS of the outline edgels, px
  bool merged = false;                   // outline is not a single ellipse
  bool truncated = false;                // edgels reach the image border
  std::int64_t frame_index = 0;
  int camera_id = 1;
};

struct DetectionParams {
  double gaussian_sigma = 0.0;  // pre-smoothing, 0 disables
  double high_threshold = 0.0;  // gradient magnitude (gray/px); 0 selects Otsu
  double high_floor = 10.0;     // lower bound for the automatic threshold
  double low_ratio = 0.4;
  double min_contour_px = 30.0;
  double merge_gap_px = 3.0;
  double hull_band_px = 1.0;    // edgels this close to the hull are outline points
  double merged_rms_px = 0.75;
  double border_margin_px = 2.0;
};

/// Subpixel Canny edgels (hysteresis output) with their 8-connected group id.
struct EdgeMap {
  std::vector<Eigen::Vector2d> points;
  std::vector<Eigen::Vector2i> pixels;
  std::vector<int> group;
  int groups = 0;
  double high = 0;
  double low = 0;
};

EdgeMap canny(const Image8& image, const DetectionParams& params = {});

/// Counter-clockwise convex hull (monotone chain); collinear points dropped.
std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> points);

/// Distance between two convex polygons, 0 when they intersect or one
/// contains the other.
double polygon_distance(const std::vector<Eigen::Vector2d>& a, const std::vector<Eigen::Vector2d>& b);

/// With `lens` set, `foreground` is in raw sensor coordinates and the edgels
/// are undistorted before grouping and fitting, so results are in ideal
/// pixels without resampling the image.
std::vector<BubbleDetection> detect_bubbles(const Image8& foreground, const DetectionParams& params = {},
                                            std::int64_t frame_index = 0, int camera_id = 1,
                                            const Intrinsicsd* lens = nullptr);

nlohmann::json to_json(const BubbleDetection& d);

}  // namespace bubblestream
