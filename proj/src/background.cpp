#include "bubblestream/background.hpp"

#include <algorithm>
#include <cmath>

#include "bubblestream/error.hpp"

namespace bubblestream {

SlidingMedian::SlidingMedian(int width, int height)
    : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "empty median image");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  hist_.assign(n * 256, 0);
  median_.assign(n, 0);
  below_.assign(n, 0);
}

// Histograms are stored bin-major (hist_[value * n + pixel]): neighbouring
// pixels usually share their median and incoming values, so the walk stays
// within a few contiguous planes.
inline void SlidingMedian::settle(std::size_t p) {
  const std::size_t n = median_.size();
  const int rank = (count_ - 1) / 2;
  const std::uint16_t* h = &hist_[p];
  int m = median_[p];
  int below = below_[p];
  while (below > rank) {
    --m;
    below -= h[m * n];
  }
  while (below + h[m * n] <= rank) {
    below += h[m * n];
    ++m;
  }
  median_[p] = static_cast<std::uint8_t>(m);
  below_[p] = static_cast<std::uint16_t>(below);
}

void SlidingMedian::add(const std::uint8_t* pixels) {
  if (count_ == 0xFFFF) throw Error(ErrorCode::InvalidArgument, "median window too long");
  ++count_;
  const std::size_t n = median_.size();
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint8_t v = pixels[p];
    ++hist_[v * n + p];
    if (v < median_[p]) ++below_[p];
    settle(p);
  }
}

void SlidingMedian::remove(const std::uint8_t* pixels) {
  if (count_ == 0) throw Error(ErrorCode::InvalidArgument, "remove from an empty median window");
  --count_;
  if (count_ == 0) {
    std::fill(hist_.begin(), hist_.end(), 0);
    std::fill(median_.begin(), median_.end(), 0);
    std::fill(below_.begin(), below_.end(), 0);
    return;
  }
  const std::size_t n = median_.size();
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint8_t v = pixels[p];
    --hist_[v * n + p];
    if (v < median_[p]) --below_[p];
    settle(p);
  }
}

void SlidingMedian::replace(const std::uint8_t* incoming, const std::uint8_t* outgoing) {
  if (count_ == 0) throw Error(ErrorCode::InvalidArgument, "replace in an empty median window");
  const std::size_t n = median_.size();
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint8_t in = incoming[p], out = outgoing[p];
    if (in == out) continue;
    ++hist_[in * n + p];
    --hist_[out * n + p];
    const std::uint8_t m = median_[p];
    below_[p] = static_cast<std::uint16_t>(below_[p] + (in < m) - (out < m));
    settle(p);
  }
}

Image8 SlidingMedian::median() const {
  if (count_ == 0) throw Error(ErrorCode::InvalidArgument, "median of an empty window");
  Image8 out(height_, width_);
  std::copy(median_.begin(), median_.end(), out.data());
  return out;
}

Image8 median_background(std::span<const Image8> window) {
  if (window.empty()) throw Error(ErrorCode::InvalidArgument, "empty background window");
  const auto rows = window.front().rows(), cols = window.front().cols();
  std::vector<std::uint8_t> series(window.size());
  Image8 out(rows, cols);
  for (const Image8& f : window)
    if (f.rows() != rows || f.cols() != cols)
      throw Error(ErrorCode::DimensionMismatch, "background window frames differ in size");
  const std::size_t rank = (window.size() - 1) / 2;
  for (Eigen::Index p = 0; p < out.size(); ++p) {
    for (std::size_t k = 0; k < window.size(); ++k) series[k] = window[k].data()[p];
    std::nth_element(series.begin(), series.begin() + static_cast<std::ptrdiff_t>(rank), series.end());
    out.data()[p] = series[rank];
  }
  return out;
}

UndistortionMap::UndistortionMap(const Intrinsics<double>& intrinsics, int width, int height)
    : width_(width), height_(height), identity_(!intrinsics.has_distortion()) {
  if (identity_) return;
  taps_.resize(static_cast<std::size_t>(width) * height);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const Eigen::Vector2d src = distort_pixel(intrinsics, Eigen::Vector2d(c, r));
      Tap& tap = taps_[static_cast<std::size_t>(r) * width + c];
      if (!(src.x() >= 0 && src.y() >= 0 && src.x() <= width - 1 && src.y() <= height - 1)) continue;
      const int x0 = std::min(static_cast<int>(src.x()), std::max(width - 2, 0));
      const int y0 = std::min(static_cast<int>(src.y()), std::max(height - 2, 0));
      tap.offset = y0 * width + x0;
      const double fx = src.x() - x0, fy = src.y() - y0;
      const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      // Rounded weights must still sum to 2048 without going negative.
      int q[4], total = 0;
      for (int k = 0; k < 4; ++k) total += q[k] = static_cast<int>(std::lround(w[k] * 2048));
      q[std::max_element(q, q + 4) - q] += 2048 - total;
      for (int k = 0; k < 4; ++k) tap.w[k] = static_cast<std::uint16_t>(q[k]);
    }
}

Image8 UndistortionMap::apply(const Image8& raw) const {
  if (raw.cols() != width_ || raw.rows() != height_)
    throw Error(ErrorCode::DimensionMismatch, "image size differs from the undistortion map");
  if (identity_) return raw;
  Image8 out(height_, width_);
  const std::uint8_t* src = raw.data();
  const std::ptrdiff_t stride = width_ > 1 ? width_ : 0;
  const std::ptrdiff_t step = width_ > 1 ? 1 : 0;
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    const Tap& t = taps_[i];
    if (t.offset < 0) {
      out.data()[i] = 0;
      continue;
    }
    const std::uint8_t* s = src + t.offset;
    const std::uint32_t v = t.w[0] * s[0] + t.w[1] * s[step] + t.w[2] * s[stride] + t.w[3] * s[stride + step];
    out.data()[i] = static_cast<std::uint8_t>((v + 1024) >> 11);
  }
  return out;
}

Image8 absolute_difference(const Image8& frame, const Image8& background) {
  if (frame.rows() != background.rows() || frame.cols() != background.cols())
    throw Error(ErrorCode::DimensionMismatch, "frame and background differ in size");
  Image8 diff(frame.rows(), frame.cols());
  for (Eigen::Index p = 0; p < diff.size(); ++p) {
    const int d = int(frame.data()[p]) - int(background.data()[p]);
    diff.data()[p] = static_cast<std::uint8_t>(d < 0 ? -d : d);
  }
  return diff;
}

Image8 remove_background(const Image8& frame, const Image8& background, const UndistortionMap& map) {
  return map.apply(absolute_difference(frame, background));
}

Image8 remove_background(const Image8& frame, const Image8& background, const Intrinsics<double>& intrinsics) {
  return remove_background(frame, background,
                           UndistortionMap(intrinsics, static_cast<int>(frame.cols()), static_cast<int>(frame.rows())));
}

BackgroundStream::BackgroundStream(const FrameSource& source, int window, std::vector<std::size_t> skip,
                                   const std::optional<Intrinsics<double>>& undistort)
    : source_(source),
      window_(window),
      median_(source.width(), source.height()) {
  if (window < 1 || window % 2 == 0) throw Error(ErrorCode::InvalidArgument, "median window must be odd");
  if (undistort) map_.emplace(*undistort, source.width(), source.height());
  std::sort(skip.begin(), skip.end());
  for (std::size_t i = 0; i < source.size(); ++i)
    if (!std::binary_search(skip.begin(), skip.end(), i)) order_.push_back(i);
}

bool BackgroundStream::next(std::size_t& position, Image8& foreground) {
  const std::size_t n = order_.size();
  if (cursor_ >= n) return false;
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(window_), n);
  const std::size_t start = std::min(cursor_ > w / 2 ? cursor_ - w / 2 : 0, n - w);
  while (hi_ < start + w) {
    buffer_.push_back(source_.load(order_[hi_++]));
    if (buffer_.back().cols() != median_.width() || buffer_.back().rows() != median_.height())
      throw Error(ErrorCode::DimensionMismatch, "frame size changes within the sequence");
    if (lo_ < start) {
      median_.replace(buffer_.back().data(), buffer_.front().data());
      buffer_.pop_front();
      ++lo_;
    } else {
      median_.add(buffer_.back().data());
    }
  }
  const Image8& frame = buffer_[cursor_ - lo_];
  Image8 background(frame.rows(), frame.cols());
  for (Eigen::Index p = 0; p < background.size(); ++p) background.data()[p] = median_.median_at(static_cast<std::size_t>(p));
  foreground = map_ ? remove_background(frame, background, *map_) : absolute_difference(frame, background);
  position = order_[cursor_++];
  return true;
}

}  // namespace bubblestream
