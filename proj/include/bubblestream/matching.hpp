#pragma once

// Stereo correspondence of the bubbles of one synchronized frame pair: gated
// candidates along the epipolar lines and a global bipartite assignment.

#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bubblestream/detection.hpp"
#include "bubblestream/geometry.hpp"

namespace bubblestream {

struct MatchCandidate {
  int det1 = 0;  // index into the camera-1 detections
  int det2 = 0;
  double epi_dist = 0;  // px
  double cost = 0;
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // sorted by first index
  std::vector<int> unmatched1;
  std::vector<int> unmatched2;
  double total_cost = 0;  // summed over pairs in order
};

struct MatchingParams {
  double gate_px = 5.0;
  double area_weight = 0.0;  // cost += weight * |ln(area1 / area2)|
};

/// Cross pairs whose ellipse centres (ideal pixels) have a symmetric epipolar
/// distance below the gate.
std::vector<MatchCandidate> build_candidates(const StereoRigd& rig, std::span<const BubbleDetection> dets1,
                                             std::span<const BubbleDetection> dets2,
                                             const MatchingParams& params = {});

/// Among the matchings of maximum size that use only candidate edges, one of
/// minimum total cost. Duplicate edges keep their cheapest cost.
Assignment solve_assignment(std::span<const MatchCandidate> candidates, int n1, int n2);

/// Row-to-column Hungarian (Kuhn-Munkres) on a dense matrix with forbidden
/// cells: maximizes the number of allowed cells used, then minimizes their
/// sum. Unassigned rows get -1.
std::vector<int> hungarian(const Eigen::MatrixXd& cost, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed);

nlohmann::json to_json(const Assignment& a);

}  // namespace bubblestream
