#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "bubblestream/calibration_io.hpp"
#include "bubblestream/matching.hpp"
#include "bubblestream/quadric.hpp"

using namespace bubblestream;

namespace {

struct Best {
  int size = -1;
  double cost = 0;
};

// Every injective map from rows to columns-or-nothing, via permutations of
// the padded column set.
Best brute_force(const std::vector<MatchCandidate>& cands, int n1, int n2) {
  const int n = std::max(n1, n2);
  Eigen::MatrixXd cost = Eigen::MatrixXd::Constant(n, n, -1);
  for (const auto& c : cands) cost(c.det1, c.det2) = c.cost;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Best best;
  do {
    int size = 0;
    double sum = 0;
    for (int i = 0; i < n1; ++i)
      if (perm[i] < n2 && cost(i, perm[i]) >= 0) {
        ++size;
        sum += cost(i, perm[i]);
      }
    if (size > best.size || (size == best.size && sum < best.cost)) best = {size, sum};
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<MatchCandidate> random_instance(std::mt19937_64& rng, int n1, int n2, double density) {
  std::uniform_real_distribution<double> u(0, 1), c(0, 5);
  std::vector<MatchCandidate> out;
  for (int i = 0; i < n1; ++i)
    for (int j = 0; j < n2; ++j)
      if (u(rng) < density) {
        const double d = c(rng);
        out.push_back({i, j, d, d});
      }
  return out;
}

void check_valid(const Assignment& a, int n1, int n2) {
  std::vector<int> seen1(n1, 0), seen2(n2, 0);
  for (auto [i, j] : a.pairs) {
    ++seen1[i];
    ++seen2[j];
  }
  for (int i : a.unmatched1) ++seen1[i];
  for (int j : a.unmatched2) ++seen2[j];
  for (int s : seen1) CHECK(s == 1);
  for (int s : seen2) CHECK(s == 1);
}

BubbleDetection detection_of(const Camerad& cam, const Ellipsoidd& e) {
  BubbleDetection d;
  d.ellipse = ellipse_from_conic(project_ellipsoid(cam, e));
  return d;
}

Ellipsoidd sphere(const Eigen::Vector3d& c, double r) {
  Ellipsoidd e;
  e.center = c;
  e.semi_axes.setConstant(r);
  return e;
}

}  // namespace

TEST_CASE("solve_assignment small cases") {
  SUBCASE("single candidate") {
    const std::vector<MatchCandidate> c{{0, 0, 0.3, 0.3}};
    const Assignment a = solve_assignment(c, 1, 1);
    REQUIRE(a.pairs.size() == 1);
    CHECK(a.pairs[0] == std::pair{0, 0});
    CHECK(a.unmatched1.empty());
    CHECK(a.unmatched2.empty());
  }
  SUBCASE("diagonal 3x3") {
    std::vector<MatchCandidate> c;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) c.push_back({i, j, 0, i == j ? 1.0 : 100.0});
    const Assignment a = solve_assignment(c, 3, 3);
    REQUIRE(a.pairs.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(a.pairs[i] == std::pair{i, i});
    CHECK(a.total_cost == 3.0);
  }
  SUBCASE("empty") {
    const Assignment a = solve_assignment({}, 0, 0);
    CHECK(a.pairs.empty());
    const Assignment b = solve_assignment({}, 2, 3);
    CHECK(b.pairs.empty());
    CHECK(b.unmatched1 == std::vector<int>{0, 1});
    CHECK(b.unmatched2 == std::vector<int>{0, 1, 2});
  }
  SUBCASE("cardinality beats cost") {
    // Taking the cheap edge (0,0) alone would leave row 1 without a partner.
    const std::vector<MatchCandidate> c{{0, 0, 0, 0.1}, {0, 1, 0, 4.0}, {1, 0, 0, 4.0}};
    const Assignment a = solve_assignment(c, 2, 2);
    CHECK(a.pairs.size() == 2);
    CHECK(a.total_cost == 8.0);
  }
  SUBCASE("rejects bad candidates") {
    const std::vector<MatchCandidate> out_of_range{{0, 2, 0, 1}};
    CHECK_THROWS_AS(solve_assignment(out_of_range, 1, 2), Error);
    const std::vector<MatchCandidate> negative{{0, 0, 0, -1}};
    CHECK_THROWS_AS(solve_assignment(negative, 1, 1), Error);
  }
}

TEST_CASE("solve_assignment equals exhaustive search on random gated instances") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> size(0, 8);
  std::uniform_real_distribution<double> density(0.15, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int n1 = size(rng), n2 = size(rng);
    const auto cands = random_instance(rng, n1, n2, density(rng));
    const Assignment a = solve_assignment(cands, n1, n2);
    check_valid(a, n1, n2);
    const Best best = brute_force(cands, n1, n2);
    CHECK(static_cast<int>(a.pairs.size()) == best.size);
    CHECK(a.total_cost == best.cost);
  }
}

TEST_CASE("swapping the cameras transposes the assignment") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n1 = 1 + trial % 7, n2 = 1 + (trial * 3) % 8;
    const auto cands = random_instance(rng, n1, n2, 0.6);
    std::vector<MatchCandidate> swapped;
    for (const auto& c : cands) swapped.push_back({c.det2, c.det1, c.epi_dist, c.cost});
    const Assignment a = solve_assignment(cands, n1, n2);
    const Assignment b = solve_assignment(swapped, n2, n1);
    std::vector<std::pair<int, int>> bt;
    for (auto [i, j] : b.pairs) bt.emplace_back(j, i);
    std::sort(bt.begin(), bt.end());
    CHECK(a.pairs == bt);
    CHECK(a.unmatched1 == b.unmatched2);
  }
}

TEST_CASE("a wider gate never raises the optimum at equal matching size") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(0, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const int n1 = 1 + trial % 6, n2 = 1 + (trial / 6) % 6;
    std::vector<MatchCandidate> all;
    for (int i = 0; i < n1; ++i)
      for (int j = 0; j < n2; ++j) {
        const double v = d(rng);
        all.push_back({i, j, v, v});
      }
    auto gated = [&](double gate) {
      std::vector<MatchCandidate> out;
      for (const auto& c : all)
        if (c.epi_dist < gate) out.push_back(c);
      return out;
    };
    const Assignment narrow = solve_assignment(gated(2.0), n1, n2);
    const Assignment wide = solve_assignment(gated(4.0), n1, n2);
    CHECK(wide.pairs.size() >= narrow.pairs.size());
    if (wide.pairs.size() == narrow.pairs.size()) CHECK(wide.total_cost <= narrow.total_cost + 1e-12);
  }
}

TEST_CASE("hungarian handles rectangular and fully forbidden matrices") {
  Eigen::MatrixXd cost(2, 3);
  cost << 3, 1, 2, 1, 5, 9;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> allowed =
      Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(2, 3, true);
  CHECK(hungarian(cost, allowed) == std::vector<int>{1, 0});
  allowed.setConstant(false);
  CHECK(hungarian(cost, allowed) == std::vector<int>{-1, -1});
}

TEST_CASE("build_candidates on projected bubbles") {
  const StereoRigd rig = reference_rig().pinhole();
  const Eigen::Vector3d mid(0, 0, 300);

  SUBCASE("one bubble gives one close candidate") {
    const Ellipsoidd e = sphere(mid, 3.0);
    const std::vector<BubbleDetection> d1{detection_of(rig.camera1(), e)}, d2{detection_of(rig.camera2(), e)};
    const auto c = build_candidates(rig, d1, d2);
    REQUIRE(c.size() == 1);
    CHECK(c[0].epi_dist < 0.5);
    CHECK(c[0].cost == c[0].epi_dist);
  }
  SUBCASE("two bubbles at the same height") {
    // b sits 0.4 mm off the epipolar plane of a, so all four pairings pass
    // the default gate; only the joint assignment separates them.
    const Eigen::Vector3d ca = mid + Eigen::Vector3d(-10, 0, -10);
    const Eigen::Vector3d c2 = rig.camera2().center();
    const Ellipsoidd a = sphere(ca, 3.0);
    const Ellipsoidd b = sphere(1.05 * ca + 0.06 * c2 + Eigen::Vector3d(0, 0.4, 0), 2.5);
    const std::vector<BubbleDetection> d1{detection_of(rig.camera1(), a), detection_of(rig.camera1(), b)};
    const std::vector<BubbleDetection> d2{detection_of(rig.camera2(), b), detection_of(rig.camera2(), a)};
    const auto c = build_candidates(rig, d1, d2);
    CHECK(c.size() == 4);
    CHECK(std::abs(d1[0].ellipse.center.y() - d1[1].ellipse.center.y()) < 40);
    const Assignment as = solve_assignment(c, 2, 2);
    REQUIRE(as.pairs.size() == 2);
    CHECK(as.pairs[0] == std::pair{0, 1});
    CHECK(as.pairs[1] == std::pair{1, 0});
  }
  SUBCASE("empty inputs") {
    const std::vector<BubbleDetection> none, one{detection_of(rig.camera1(), sphere(mid, 3))};
    CHECK(build_candidates(rig, none, none).empty());
    CHECK(build_candidates(rig, one, none).empty());
  }
  SUBCASE("area weight adds a penalty") {
    const Ellipsoidd e = sphere(mid, 3.0);
    const std::vector<BubbleDetection> d1{detection_of(rig.camera1(), e)}, d2{detection_of(rig.camera2(), e)};
    MatchingParams p;
    p.area_weight = 2.0;
    const auto c = build_candidates(rig, d1, d2, p);
    REQUIRE(c.size() == 1);
    const double expected =
        c[0].epi_dist + 2.0 * std::abs(std::log(d1[0].ellipse.area() / d2[0].ellipse.area()));
    CHECK(c[0].cost == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("assignment json") {
  Assignment a;
  a.pairs = {{0, 1}};
  a.unmatched2 = {0};
  a.total_cost = 0.5;
  const auto j = to_json(a);
  CHECK(j["pairs"][0][1] == 1);
  CHECK(j["unmatched2"][0] == 0);
}
