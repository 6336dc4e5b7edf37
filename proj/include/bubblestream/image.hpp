#pragma once

// 8-bit grayscale frames, binary PGM files and the frame sources that feed
// the pipeline (a directory of PGM files or an in-memory generator).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace bubblestream {

using Image8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FrameInfo {
  int camera_id = 1;
  std::int64_t index = 0;         // camera frame counter
  std::int64_t timestamp_us = 0;  // camera clock
};

struct Frame {
  Image8 pixels;
  FrameInfo info;
};

/// `<camera_id>_<index:08d>_<timestamp_us:016d>.pgm`
std::string frame_filename(const FrameInfo& info);
std::optional<FrameInfo> parse_frame_filename(const std::string& name);

Image8 read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image8& image);

/// Pixel positions sampled along the main diagonal and the counter-diagonal:
/// one per row, columns interpolated from corner to corner.
std::vector<Eigen::Vector2i> diagonal_samples(int width, int height);

/// Reads only the diagonal samples of a PGM file (seeking, no full decode).
std::vector<std::uint8_t> read_pgm_diagonals(const std::filesystem::path& path);

/// Ordered sequence of frames from one camera. Implementations must be safe
/// to call from a single thread in any order.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  /// Frame metadata sorted by timestamp.
  virtual const std::vector<FrameInfo>& frames() const = 0;
  virtual int width() const = 0;
  virtual int height() const = 0;
  virtual Image8 load(std::size_t position) const = 0;
  /// Intensities at diagonal_samples(width(), height()).
  virtual std::vector<std::uint8_t> diagonals(std::size_t position) const;
  std::size_t size() const { return frames().size(); }
};

/// All files of one camera in a directory, following the filename pattern.
class PgmDirectorySource : public FrameSource {
 public:
  /// Throws Error(Io) if the directory holds no frames of that camera.
  PgmDirectorySource(std::filesystem::path directory, int camera_id);

  const std::vector<FrameInfo>& frames() const override { return frames_; }
  int width() const override { return width_; }
  int height() const override { return height_; }
  Image8 load(std::size_t position) const override;
  std::vector<std::uint8_t> diagonals(std::size_t position) const override;

 private:
  std::filesystem::path directory_;
  std::vector<FrameInfo> frames_;
  int width_ = 0;
  int height_ = 0;
};

/// Frames already held in memory (tests and small tools).
class MemorySource : public FrameSource {
 public:
  explicit MemorySource(std::vector<Frame> frames);
  const std::vector<FrameInfo>& frames() const override { return infos_; }
  int width() const override;
  int height() const override;
  Image8 load(std::size_t position) const override { return frames_.at(position).pixels; }

 private:
  std::vector<Frame> frames_;
  std::vector<FrameInfo> infos_;
};

}  // namespace bubblestream
