#pragma once

// Black-frame detection and timestamp pairing of two independently clocked
// camera streams.

#include <cstdint>
#include <span>
#include <vector>

#include "bubblestream/image.hpp"

namespace bubblestream {

inline constexpr int kBlackThreshold = 8;

/// True if every sampled value is strictly below the threshold.
bool is_black_frame(std::span<const std::uint8_t> diagonal_values, int threshold = kBlackThreshold);

/// Positions (into source.frames()) of the black frames.
std::vector<std::size_t> detect_black_frames(const FrameSource& source, int threshold = kBlackThreshold);

struct FramePair {
  std::size_t pos1 = 0;  // position in sequence 1
  std::size_t pos2 = 0;
  std::int64_t pair_time_us = 0;  // camera-1 clock
  bool black = false;
};

/// A frame of one camera whose partner was never recorded by the other.
struct DropEvent {
  int lost_camera = 0;               // camera that is missing the frame
  std::int64_t partner_index = 0;    // counter of the unpaired frame in the other camera
  std::int64_t partner_timestamp_us = 0;
  std::int64_t expected_timestamp_us = 0;  // in the lost camera's clock
};

/// Change of the frame-counter difference between consecutive aligned black frames.
struct CounterJump {
  std::int64_t index1_before = 0;
  std::int64_t index1_after = 0;
  std::int64_t difference_change = 0;  // (i1 - i2) after minus before
};

struct SyncResult {
  double offset_us = 0;          // t1 - t2 for simultaneous exposures
  double frame_interval_us = 0;
  std::vector<FramePair> pairs;  // sorted by pos1
  std::vector<DropEvent> drops;
  std::vector<CounterJump> counter_jumps;
  std::vector<std::pair<std::size_t, std::size_t>> black_pairs;
};

/// Pairing from metadata and black-frame positions alone. Throws
/// Error(Unsynchronizable) when a sequence has no black frame or the black
/// frames of the two sequences cannot be aligned.
SyncResult synchronize(const std::vector<FrameInfo>& seq1, const std::vector<std::size_t>& black1,
                       const std::vector<FrameInfo>& seq2, const std::vector<std::size_t>& black2);

SyncResult synchronize(const FrameSource& seq1, const FrameSource& seq2, int threshold = kBlackThreshold);

}  // namespace bubblestream
