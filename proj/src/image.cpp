#include "bubblestream/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>

#include "bubblestream/error.hpp"

namespace bubblestream {

namespace fs = std::filesystem;

std::string frame_filename(const FrameInfo& info) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%d_%08lld_%016lld.pgm", info.camera_id,
                static_cast<long long>(info.index), static_cast<long long>(info.timestamp_us));
  return buf;
}

std::optional<FrameInfo> parse_frame_filename(const std::string& name) {
  static const std::regex pattern(R"(^(\d+)_(\d{8})_(\d{16})\.pgm$)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  return FrameInfo{std::stoi(m[1]), std::stoll(m[2]), std::stoll(m[3])};
}

namespace {

struct PgmHeader {
  int width = 0;
  int height = 0;
  std::streamoff data_offset = 0;
};

PgmHeader read_header(std::istream& in, const fs::path& path) {
  auto fail = [&](const std::string& why) { return Error(ErrorCode::Io, path.string() + ": " + why); };
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string comment;
        std::getline(in, comment);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw fail("not a binary PGM (P5) file");
  PgmHeader h;
  try {
    h.width = std::stoi(token());
    h.height = std::stoi(token());
    const int maxval = std::stoi(token());
    if (maxval <= 0 || maxval > 255) throw fail("only 8-bit PGM is supported");
  } catch (const std::logic_error&) {
    throw fail("malformed header");
  }
  if (h.width <= 0 || h.height <= 0) throw fail("empty image");
  h.data_offset = in.tellg();
  return h;
}

}  // namespace

Image8 read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  const PgmHeader h = read_header(in, path);
  Image8 img(h.height, h.width);
  in.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.size()))
    throw Error(ErrorCode::Io, path.string() + ": truncated pixel data");
  return img;
}

void write_pgm(const fs::path& path, const Image8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

std::vector<Eigen::Vector2i> diagonal_samples(int width, int height) {
  std::vector<Eigen::Vector2i> out;
  out.reserve(2 * static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) {
    const int c = height > 1 ? static_cast<int>(std::lround(double(r) * (width - 1) / (height - 1))) : 0;
    out.emplace_back(c, r);
    out.emplace_back(width - 1 - c, r);
  }
  return out;
}

std::vector<std::uint8_t> read_pgm_diagonals(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  const PgmHeader h = read_header(in, path);
  std::vector<std::uint8_t> values;
  for (const Eigen::Vector2i& p : diagonal_samples(h.width, h.height)) {
    in.seekg(h.data_offset + static_cast<std::streamoff>(p.y()) * h.width + p.x());
    char c = 0;
    if (!in.get(c)) throw Error(ErrorCode::Io, path.string() + ": truncated pixel data");
    values.push_back(static_cast<std::uint8_t>(c));
  }
  return values;
}

std::vector<std::uint8_t> FrameSource::diagonals(std::size_t position) const {
  const Image8 img = load(position);
  std::vector<std::uint8_t> values;
  for (const Eigen::Vector2i& p : diagonal_samples(static_cast<int>(img.cols()), static_cast<int>(img.rows())))
    values.push_back(img(p.y(), p.x()));
  return values;
}

PgmDirectorySource::PgmDirectorySource(fs::path directory, int camera_id) : directory_(std::move(directory)) {
  if (!fs::is_directory(directory_)) throw Error(ErrorCode::Io, "not a directory: " + directory_.string());
  for (const auto& entry : fs::directory_iterator(directory_)) {
    if (!entry.is_regular_file()) continue;
    const auto info = parse_frame_filename(entry.path().filename().string());
    if (info && info->camera_id == camera_id) frames_.push_back(*info);
  }
  if (frames_.empty())
    throw Error(ErrorCode::Io, "no frames of camera " + std::to_string(camera_id) + " in " + directory_.string());
  std::sort(frames_.begin(), frames_.end(), [](const FrameInfo& a, const FrameInfo& b) {
    return a.timestamp_us != b.timestamp_us ? a.timestamp_us < b.timestamp_us : a.index < b.index;
  });
  std::ifstream in(directory_ / frame_filename(frames_.front()), std::ios::binary);
  const PgmHeader h = read_header(in, directory_ / frame_filename(frames_.front()));
  width_ = h.width;
  height_ = h.height;
}

Image8 PgmDirectorySource::load(std::size_t position) const {
  Image8 img = read_pgm(directory_ / frame_filename(frames_.at(position)));
  if (img.cols() != width_ || img.rows() != height_)
    throw Error(ErrorCode::DimensionMismatch, frame_filename(frames_[position]) + " has a different size");
  return img;
}

std::vector<std::uint8_t> PgmDirectorySource::diagonals(std::size_t position) const {
  return read_pgm_diagonals(directory_ / frame_filename(frames_.at(position)));
}

MemorySource::MemorySource(std::vector<Frame> frames) : frames_(std::move(frames)) {
  std::stable_sort(frames_.begin(), frames_.end(),
                   [](const Frame& a, const Frame& b) { return a.info.timestamp_us < b.info.timestamp_us; });
  for (const Frame& f : frames_) infos_.push_back(f.info);
}

int MemorySource::width() const { return frames_.empty() ? 0 : static_cast<int>(frames_.front().pixels.cols()); }
int MemorySource::height() const { return frames_.empty() ? 0 : static_cast<int>(frames_.front().pixels.rows()); }

}  // namespace bubblestream
