#include "bubblestream/synchronization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "bubblestream/error.hpp"

namespace bubblestream {

bool is_black_frame(std::span<const std::uint8_t> diagonal_values, int threshold) {
  return !diagonal_values.empty() &&
         std::all_of(diagonal_values.begin(), diagonal_values.end(), [&](std::uint8_t v) { return v < threshold; });
}

std::vector<std::size_t> detect_black_frames(const FrameSource& source, int threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < source.size(); ++i)
    if (is_black_frame(source.diagonals(i), threshold)) out.push_back(i);
  return out;
}

namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2) return v[mid];
  const double upper = v[mid];
  return 0.5 * (upper + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

double frame_interval(const std::vector<FrameInfo>& a, const std::vector<FrameInfo>& b) {
  std::vector<double> d;
  for (const auto* seq : {&a, &b})
    for (std::size_t i = 1; i < seq->size(); ++i)
      d.push_back(double((*seq)[i].timestamp_us - (*seq)[i - 1].timestamp_us));
  if (d.empty()) throw Error(ErrorCode::Unsynchronizable, "cannot estimate the frame interval from single frames");
  const double dt = median(std::move(d));
  if (!(dt > 0)) throw Error(ErrorCode::Unsynchronizable, "timestamps are not increasing");
  return dt;
}

// Position in `times` nearest to `t`, or npos for an empty list.
std::size_t nearest(const std::vector<double>& times, double t) {
  if (times.empty()) return std::size_t(-1);
  const auto it = std::lower_bound(times.begin(), times.end(), t);
  std::size_t j = static_cast<std::size_t>(it - times.begin());
  if (j == times.size()) return j - 1;
  if (j > 0 && t - times[j - 1] <= times[j] - t) return j - 1;
  return j;
}

struct Edge {
  double residual;
  std::size_t i, j;
};

// One-to-one pairing of a[i] with b[j] + offset, residual below `gate`.
// Candidate edges come from nearest neighbours in both directions; the
// smallest residual claims a frame first.
std::vector<std::pair<std::size_t, std::size_t>> pair_nearest(const std::vector<double>& a,
                                                              const std::vector<double>& b, double offset,
                                                              double gate) {
  std::vector<Edge> edges;
  std::vector<double> b_shifted(b.size());
  for (std::size_t j = 0; j < b.size(); ++j) b_shifted[j] = b[j] + offset;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t j = nearest(b_shifted, a[i]);
    if (j < b.size() && std::abs(a[i] - b_shifted[j]) < gate) edges.push_back({std::abs(a[i] - b_shifted[j]), i, j});
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    const std::size_t i = nearest(a, b_shifted[j]);
    if (i < a.size() && std::abs(a[i] - b_shifted[j]) < gate) edges.push_back({std::abs(a[i] - b_shifted[j]), i, j});
  }
  std::sort(edges.begin(), edges.end(),
            [](const Edge& x, const Edge& y) { return std::tie(x.residual, x.i, x.j) < std::tie(y.residual, y.i, y.j); });
  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const Edge& e : edges) {
    if (used_a[e.i] || used_b[e.j]) continue;
    used_a[e.i] = used_b[e.j] = 1;
    out.emplace_back(e.i, e.j);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> stamps(const std::vector<FrameInfo>& seq, const std::vector<std::size_t>& positions) {
  std::vector<double> t;
  for (std::size_t p : positions) t.push_back(double(seq.at(p).timestamp_us));
  return t;
}

}  // namespace

SyncResult synchronize(const std::vector<FrameInfo>& seq1, const std::vector<std::size_t>& black1,
                       const std::vector<FrameInfo>& seq2, const std::vector<std::size_t>& black2) {
  if (black1.empty() || black2.empty())
    throw Error(ErrorCode::Unsynchronizable, black1.empty() ? "no black frame in sequence 1"
                                                            : "no black frame in sequence 2");
  SyncResult result;
  result.frame_interval_us = frame_interval(seq1, seq2);
  const double gate = 0.5 * result.frame_interval_us;

  // Black frames are exposed simultaneously in both cameras. Every pairing of
  // two black frames proposes an offset; keep the one aligning the most
  // black frames, the smallest |offset| on ties.
  const std::vector<double> tb1 = stamps(seq1, black1), tb2 = stamps(seq2, black2);
  std::size_t best_count = 0;
  double best_offset = 0;
  for (double t1 : tb1)
    for (double t2 : tb2) {
      const double d = t1 - t2;
      const std::size_t count = pair_nearest(tb1, tb2, d, gate).size();
      if (count > best_count || (count == best_count && std::abs(d) < std::abs(best_offset))) {
        best_count = count;
        best_offset = d;
      }
    }
  const auto aligned = pair_nearest(tb1, tb2, best_offset, gate);
  double sum = 0;
  for (const auto& [i, j] : aligned) sum += tb1[i] - tb2[j];
  result.offset_us = sum / double(aligned.size());
  for (const auto& [i, j] : aligned) result.black_pairs.emplace_back(black1[i], black2[j]);

  for (std::size_t k = 1; k < result.black_pairs.size(); ++k) {
    const auto [a1, a2] = result.black_pairs[k - 1];
    const auto [b1, b2] = result.black_pairs[k];
    const std::int64_t before = seq1[a1].index - seq2[a2].index;
    const std::int64_t after = seq1[b1].index - seq2[b2].index;
    if (before != after) result.counter_jumps.push_back({seq1[a1].index, seq1[b1].index, after - before});
  }

  std::vector<double> t1(seq1.size()), t2(seq2.size());
  for (std::size_t i = 0; i < seq1.size(); ++i) t1[i] = double(seq1[i].timestamp_us);
  for (std::size_t j = 0; j < seq2.size(); ++j) t2[j] = double(seq2[j].timestamp_us);

  std::vector<char> black_flag(seq1.size(), 0);
  for (std::size_t p : black1) black_flag[p] = 1;
  std::vector<char> paired1(seq1.size(), 0), paired2(seq2.size(), 0);
  for (const auto& [i, j] : pair_nearest(t1, t2, result.offset_us, gate)) {
    result.pairs.push_back({i, j, seq1[i].timestamp_us, bool(black_flag[i])});
    paired1[i] = paired2[j] = 1;
  }

  const double lo = std::max(t1.front(), t2.front() + result.offset_us);
  const double hi = std::min(t1.back(), t2.back() + result.offset_us);
  for (std::size_t i = 0; i < seq1.size(); ++i)
    if (!paired1[i] && t1[i] >= lo && t1[i] <= hi)
      result.drops.push_back({2, seq1[i].index, seq1[i].timestamp_us, std::llround(t1[i] - result.offset_us)});
  for (std::size_t j = 0; j < seq2.size(); ++j)
    if (!paired2[j] && t2[j] + result.offset_us >= lo && t2[j] + result.offset_us <= hi)
      result.drops.push_back({1, seq2[j].index, seq2[j].timestamp_us, std::llround(t2[j] + result.offset_us)});
  std::sort(result.drops.begin(), result.drops.end(), [](const DropEvent& a, const DropEvent& b) {
    return std::tie(a.lost_camera, a.partner_index) < std::tie(b.lost_camera, b.partner_index);
  });
  return result;
}

SyncResult synchronize(const FrameSource& seq1, const FrameSource& seq2, int threshold) {
  return synchronize(seq1.frames(), detect_black_frames(seq1, threshold), seq2.frames(),
                     detect_black_frames(seq2, threshold));
}

}  // namespace bubblestream
