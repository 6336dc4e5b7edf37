#pragma once

// Temporal-median background over a sliding window of frames, background
// removal and undistortion resampling.

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "bubblestream/geometry.hpp"
#include "bubblestream/image.hpp"

namespace bubblestream {

/// Per-pixel median of the last W frames, updated incrementally with one
/// 256-bin histogram per pixel. The median of n values is the element of
/// rank (n-1)/2 in sorted order (the lower median for even n).
class SlidingMedian {
 public:
  SlidingMedian(int width, int height);

  void add(const std::uint8_t* pixels);
  void remove(const std::uint8_t* pixels);
  /// add(incoming) and remove(outgoing) in one pass.
  void replace(const std::uint8_t* incoming, const std::uint8_t* outgoing);
  int count() const { return count_; }
  int width() const { return width_; }
  int height() const { return height_; }

  /// Current median image; requires count() > 0.
  Image8 median() const;
  std::uint8_t median_at(std::size_t pixel) const { return median_[pixel]; }

 private:
  void settle(std::size_t pixel);

  int width_;
  int height_;
  int count_ = 0;
  std::vector<std::uint16_t> hist_;    // 256 x pixels
  std::vector<std::uint8_t> median_;   // tracked median value
  std::vector<std::uint16_t> below_;   // number of samples < median_
};

/// Median of a whole window at once. Throws InvalidArgument for an empty
/// window or frames of differing size.
Image8 median_background(std::span<const Image8> window);

/// Bilinear lookup table from the undistorted (pinhole) image to the raw
/// sensor image of one camera, same size and intrinsic matrix.
class UndistortionMap {
 public:
  UndistortionMap(const Intrinsics<double>& intrinsics, int width, int height);
  Image8 apply(const Image8& raw) const;
  int width() const { return width_; }
  int height() const { return height_; }
  bool identity() const { return identity_; }

 private:
  struct Tap {
    std::int32_t offset = -1;  // top-left source pixel, -1 outside
    std::uint16_t w[4] = {0, 0, 0, 0};  // bilinear weights, sum 1 << 11
  };
  int width_;
  int height_;
  bool identity_ = false;
  std::vector<Tap> taps_;
};

/// |frame - background|, then resampled into the undistorted image. Throws
/// DimensionMismatch when the sizes disagree.
Image8 remove_background(const Image8& frame, const Image8& background, const UndistortionMap& map);
Image8 remove_background(const Image8& frame, const Image8& background, const Intrinsics<double>& intrinsics);

/// |frame - background| without resampling. Throws DimensionMismatch.
Image8 absolute_difference(const Image8& frame, const Image8& background);

/// Walks a frame source in order and yields foreground images. The median
/// window of frame k is centred on k and shifted inwards at the ends of the
/// sequence so it always holds min(W, n) frames. Frames listed in `skip`
/// (black frames) neither enter the window nor produce output.
class BackgroundStream {
 public:
  /// With `undistort` unset the foreground stays in raw sensor coordinates.
  BackgroundStream(const FrameSource& source, int window, std::vector<std::size_t> skip = {},
                   const std::optional<Intrinsics<double>>& undistort = std::nullopt);

  /// False when the sequence is exhausted.
  bool next(std::size_t& position, Image8& foreground);

 private:
  const FrameSource& source_;
  std::optional<UndistortionMap> map_;
  std::vector<std::size_t> order_;  // positions that take part
  int window_;
  SlidingMedian median_;
  std::deque<Image8> buffer_;  // frames order_[lo_, hi_)
  std::size_t lo_ = 0;
  std::size_t hi_ = 0;
  std::size_t cursor_ = 0;
};

}  // namespace bubblestream
