#include "bubblestream/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bubblestream/error.hpp"

namespace bubblestream {

namespace {

// Costs ordered lexicographically by (forbidden cells, summed cost). The
// potentials of the Hungarian method live in the same ordered group, so a
// forbidden cell is never traded for any amount of real cost.
struct Lex {
  long long hard = 0;
  double soft = 0;

  Lex operator+(const Lex& o) const { return {hard + o.hard, soft + o.soft}; }
  Lex operator-(const Lex& o) const { return {hard - o.hard, soft - o.soft}; }
  bool operator<(const Lex& o) const { return hard != o.hard ? hard < o.hard : soft < o.soft; }
};

constexpr Lex kInfinity{std::numeric_limits<long long>::max() / 4, 0};

}  // namespace

std::vector<int> hungarian(const Eigen::MatrixXd& cost, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed) {
  if (cost.rows() != allowed.rows() || cost.cols() != allowed.cols())
    throw Error(ErrorCode::DimensionMismatch, "cost and mask differ in size");
  const int rows = static_cast<int>(cost.rows()), cols = static_cast<int>(cost.cols());
  const int n = std::max(rows, cols);
  std::vector<int> result(rows, -1);
  if (rows == 0 || cols == 0) return result;

  auto at = [&](int i, int j) -> Lex {
    if (i >= rows || j >= cols) return {1, 0};  // padding counts as unmatched
    return allowed(i, j) ? Lex{0, cost(i, j)} : Lex{1, 0};
  };

  // 1-based potentials with a virtual column 0.
  std::vector<Lex> u(n + 1), v(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<Lex> minv(n + 1, kInfinity);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      Lex delta = kInfinity;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const Lex cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] = u[p[j]] + delta;
          v[j] = v[j] - delta;
        } else {
          minv[j] = minv[j] - delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= n; ++j) {
    const int i = p[j] - 1, c = j - 1;
    if (i < rows && c < cols && allowed(i, c)) result[i] = c;
  }
  return result;
}

std::vector<MatchCandidate> build_candidates(const StereoRigd& rig, std::span<const BubbleDetection> dets1,
                                             std::span<const BubbleDetection> dets2, const MatchingParams& params) {
  std::vector<MatchCandidate> out;
  if (dets1.empty() || dets2.empty()) return out;
  const Eigen::Matrix3d F = fundamental_matrix(rig);
  for (std::size_t i = 0; i < dets1.size(); ++i)
    for (std::size_t j = 0; j < dets2.size(); ++j) {
      const double d = epipolar_distance(F, dets1[i].ellipse.center, dets2[j].ellipse.center);
      if (!(d < params.gate_px)) continue;
      double cost = d;
      if (params.area_weight != 0.0)
        cost += params.area_weight * std::abs(std::log(dets1[i].ellipse.area() / dets2[j].ellipse.area()));
      out.push_back({static_cast<int>(i), static_cast<int>(j), d, cost});
    }
  return out;
}

Assignment solve_assignment(std::span<const MatchCandidate> candidates, int n1, int n2) {
  if (n1 < 0 || n2 < 0) throw Error(ErrorCode::InvalidArgument, "negative detection count");
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n1, n2);
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> allowed =
      Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n1, n2, false);
  for (const MatchCandidate& c : candidates) {
    if (c.det1 < 0 || c.det1 >= n1 || c.det2 < 0 || c.det2 >= n2)
      throw Error(ErrorCode::InvalidArgument, "candidate index out of range");
    if (!std::isfinite(c.cost) || c.cost < 0) throw Error(ErrorCode::InvalidArgument, "candidate cost must be finite and >= 0");
    if (!allowed(c.det1, c.det2) || c.cost < cost(c.det1, c.det2)) cost(c.det1, c.det2) = c.cost;
    allowed(c.det1, c.det2) = true;
  }
  const std::vector<int> row = hungarian(cost, allowed);
  Assignment a;
  std::vector<char> taken(n2, 0);
  for (int i = 0; i < n1; ++i) {
    if (row[i] < 0) {
      a.unmatched1.push_back(i);
      continue;
    }
    a.pairs.emplace_back(i, row[i]);
    a.total_cost += cost(i, row[i]);
    taken[row[i]] = 1;
  }
  for (int j = 0; j < n2; ++j)
    if (!taken[j]) a.unmatched2.push_back(j);
  return a;
}

nlohmann::json to_json(const Assignment& a) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [i, j] : a.pairs) pairs.push_back({i, j});
  return {{"pairs", pairs}, {"unmatched1", a.unmatched1}, {"unmatched2", a.unmatched2}, {"total_cost", a.total_cost}};
}

}  // namespace bubblestream
