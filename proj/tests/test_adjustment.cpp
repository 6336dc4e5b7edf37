#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include <Eigen/QR>

#include "bubblestream/bubble_adjustment.hpp"
#include "bubblestream/calibration_io.hpp"
#include "bubblestream/levenberg_marquardt.hpp"
#include "test_support.hpp"

using namespace bubblestream;
using bubblestream::testing::random_ellipsoid;

namespace {

const StereoRigd& rig() {
  static const StereoRigd r = reference_rig().pinhole();
  return r;
}

/// Oblate bubble with equivalent diameter d, tilted a little off vertical.
template <typename Rng>
Ellipsoidd bubble(Rng& rng, double d) {
  std::normal_distribution<double> n(0, 1);
  Ellipsoidd e = random_ellipsoid(rng);
  const double chi = 0.8;
  e.semi_axes = {0.5 * d * std::cbrt(1 / chi), 0.5 * d * std::cbrt(1 / chi), 0.5 * d * std::cbrt(chi * chi)};
  // Symmetry axis (third column) near the world's vertical (y).
  Eigen::Matrix3d upright;
  upright << 1, 0, 0, 0, 0, 1, 0, -1, 0;
  e.orientation = rotation_from_axis_angle<double>(Eigen::Vector3d(n(rng), 0, n(rng)) * 0.15) * upright;
  return e;
}

std::vector<Eigen::Vector2d> outline(int camera, const Ellipsoidd& e) {
  return sample_ellipse(ellipse_from_conic(project_ellipsoid(rig().camera(camera), e)), 64);
}

Ellipse2d outline_ellipse(int camera, const Ellipsoidd& e) {
  return ellipse_from_conic(project_ellipsoid(rig().camera(camera), e));
}

Eigen::Matrix4d unit_dual(const Ellipsoidd& e) {
  const Eigen::Matrix4d q = e.dual_quadric();
  return q / q.norm();
}

/// Relative residual of fitting Q*_a by α Q*_b + μ (c1 c2ᵀ + c2 c1ᵀ).
double pencil_residual(const Ellipsoidd& a, const Ellipsoidd& b) {
  const Eigen::Vector4d c1 = rig().camera1().center().homogeneous();
  const Eigen::Vector4d c2 = rig().camera2().center().homogeneous();
  Eigen::Matrix4d S = c1 * c2.transpose() + c2 * c1.transpose();
  S /= S.norm();
  Eigen::Matrix<double, 16, 2> A;
  A.col(0) = Eigen::Map<const Eigen::Matrix<double, 16, 1>>(unit_dual(b).data());
  A.col(1) = Eigen::Map<const Eigen::Matrix<double, 16, 1>>(S.data());
  const Eigen::Matrix4d qa = unit_dual(a);
  const Eigen::Matrix<double, 16, 1> y = Eigen::Map<const Eigen::Matrix<double, 16, 1>>(qa.data());
  const Eigen::Vector2d coef = A.colPivHouseholderQr().solve(y);
  return (A * coef - y).norm();
}

double relative_axis_error(const Ellipsoidd& a, const Ellipsoidd& b) {
  return (canonical(a).semi_axes.cwiseQuotient(canonical(b).semi_axes) - Eigen::Vector3d::Ones())
      .cwiseAbs()
      .maxCoeff();
}

StereoRigd table2_perturbation(const StereoRigd& r) {
  const double deg = M_PI / 180;
  const Eigen::Matrix3d Rd = (Eigen::AngleAxisd(0.708 * deg, Eigen::Vector3d::UnitZ()) *
                              Eigen::AngleAxisd(-0.557 * deg, Eigen::Vector3d::UnitY()) *
                              Eigen::AngleAxisd(0.596 * deg, Eigen::Vector3d::UnitX()))
                                 .toRotationMatrix();
  StereoRigd out = r;
  out.pose2.rotation = Rd * r.pose2.rotation;
  const Eigen::Vector3d t = r.pose2.translation;
  out.pose2.translation = (t + 3.0 * t.unitOrthogonal()).normalized() * t.norm();
  return out;
}

double held_out_epipolar_error(const StereoRigd& truth, const StereoRigd& estimate, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> lateral(-40, 40), depth(262, 342);
  double sum = 0;
  for (int i = 0; i < 500; ++i) {
    const Eigen::Vector3d X(lateral(rng), lateral(rng), depth(rng));
    const Eigen::Vector2d x1 = (truth.camera1().projection_matrix() * X.homogeneous()).hnormalized();
    const Eigen::Vector2d x2 = (truth.camera2().projection_matrix() * X.homogeneous()).hnormalized();
    sum += epipolar_distance(estimate, x1, x2);
  }
  return sum / 500;
}

}  // namespace

TEST_CASE("minimize_arrow solves a linear least-squares problem") {
  // Two blocks y_k = a_k + b_k t + s t² sharing s; the oracle is one dense QR.
  std::mt19937 rng(2);
  std::normal_distribution<double> n(0, 1);
  const int per = 12;
  Eigen::VectorXd ts(per), obs1(per), obs2(per);
  for (int i = 0; i < per; ++i) {
    ts[i] = i * 0.25;
    obs1[i] = 1 + 2 * ts[i] + 0.5 * ts[i] * ts[i] + 0.01 * n(rng);
    obs2[i] = -3 + 0.5 * ts[i] + 0.5 * ts[i] * ts[i] + 0.01 * n(rng);
  }
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * per, 5);
  Eigen::VectorXd y(2 * per);
  for (int i = 0; i < per; ++i) {
    A.row(i) << 1, ts[i], 0, 0, ts[i] * ts[i];
    A.row(per + i) << 0, 0, 1, ts[i], ts[i] * ts[i];
    y[i] = obs1[i];
    y[per + i] = obs2[i];
  }
  const Eigen::VectorXd oracle = A.colPivHouseholderQr().solve(y);

  std::vector<Eigen::Vector2d> local(2, Eigen::Vector2d::Zero());
  Eigen::VectorXd shared = Eigen::VectorXd::Zero(1);
  auto evaluate = [&](std::size_t k, const Eigen::Vector2d& x, const Eigen::VectorXd& s, bool) {
    ArrowBlock<2> b;
    const Eigen::VectorXd& o = k == 0 ? obs1 : obs2;
    b.residuals = (x[0] + x[1] * ts.array() + s[0] * ts.array().square()).matrix() - o;
    b.local_jacobian.resize(per, 2);
    b.local_jacobian.col(0).setOnes();
    b.local_jacobian.col(1) = ts;
    b.shared_jacobian = ts.array().square().matrix();
    return b;
  };
  const LmSummary s = minimize_arrow<2>(local, shared, evaluate, LmOptions{});
  CHECK(s.converged);
  CHECK(s.final_cost <= s.initial_cost);
  CHECK(std::abs(local[0][0] - oracle[0]) < 1e-8);
  CHECK(std::abs(local[0][1] - oracle[1]) < 1e-8);
  CHECK(std::abs(local[1][0] - oracle[2]) < 1e-8);
  CHECK(std::abs(local[1][1] - oracle[3]) < 1e-8);
  CHECK(std::abs(shared[0] - oracle[4]) < 1e-8);
}

TEST_CASE("minimize_arrow: Rosenbrock valley and Huber robustness") {
  SUBCASE("Rosenbrock") {
    std::vector<Eigen::Vector2d> x{{-1.2, 1.0}};
    Eigen::VectorXd none(0);
    auto evaluate = [](std::size_t, const Eigen::Vector2d& p, const Eigen::VectorXd&, bool) {
      ArrowBlock<2> b;
      b.residuals = Eigen::Vector2d(10 * (p[1] - p[0] * p[0]), 1 - p[0]);
      b.local_jacobian.resize(2, 2);
      b.local_jacobian << -20 * p[0], 10, -1, 0;
      return b;
    };
    const LmSummary s = minimize_arrow<2>(x, none, evaluate, LmOptions{});
    CHECK(s.converged);
    CHECK((x[0] - Eigen::Vector2d(1, 1)).norm() < 1e-8);
  }
  SUBCASE("Huber loss limits the pull of an outlier") {
    // Location estimate of {0 x 20, 100}: mean 4.76, Huber(1) stays near 0.05.
    Eigen::VectorXd data = Eigen::VectorXd::Zero(21);
    data[20] = 100;
    for (double delta : {0.0, 1.0}) {
      std::vector<Eigen::Matrix<double, 1, 1>> x(1, Eigen::Matrix<double, 1, 1>::Zero());
      Eigen::VectorXd none(0);
      auto evaluate = [&](std::size_t, const Eigen::Matrix<double, 1, 1>& p, const Eigen::VectorXd&, bool) {
        ArrowBlock<1> b;
        b.residuals = (p[0] - data.array()).matrix();
        b.local_jacobian = Eigen::VectorXd::Ones(21);
        return b;
      };
      minimize_arrow<1>(x, none, evaluate, LmOptions{100, 1e-12, 1e-15, delta});
      if (delta == 0.0)
        CHECK(x[0][0] == doctest::Approx(100.0 / 21).epsilon(1e-7));
      else
        CHECK(x[0][0] == doctest::Approx(1.0 / 20).epsilon(1e-6));
    }
  }
}

TEST_CASE("init_ellipsoid") {
  SUBCASE("sphere") {
    Ellipsoidd s;
    s.center = {5, -10, 300};
    s.semi_axes.setConstant(5);
    const Ellipsoidd e = init_ellipsoid(rig(), outline_ellipse(1, s), outline_ellipse(2, s));
    CHECK((e.center - s.center).norm() < 0.1);
    CHECK(relative_axis_error(e, s) < 0.02);
    CHECK((e.semi_axes.maxCoeff() - e.semi_axes.minCoeff()) / e.semi_axes.mean() < 0.01);
  }
  SUBCASE("axis-aligned ellipsoid") {
    Ellipsoidd a;
    a.center = {0, 0, 302};
    a.semi_axes = {6, 4, 3};
    const Ellipsoidd e = init_ellipsoid(rig(), outline_ellipse(1, a), outline_ellipse(2, a));
    CHECK(relative_axis_error(e, a) < 0.01);
  }
  SUBCASE("identical outlines of a sphere give a sphere") {
    // Camera 2 placed so the sphere's outline is the same ellipse in both views.
    StereoRigd sym = rig();
    sym.cam2 = sym.cam1;
    const Eigen::Vector3d centre(0, 0, 300);
    sym.pose2.rotation = Eigen::AngleAxisd(M_PI / 2, Eigen::Vector3d::UnitY()).toRotationMatrix();
    sym.pose2.translation = -sym.pose2.rotation * Eigen::Vector3d(300, 0, 300);
    Ellipsoidd s;
    s.center = centre;
    s.semi_axes.setConstant(4);
    const Ellipse2d e1 = ellipse_from_conic(project_ellipsoid(sym.camera1(), s));
    const Ellipse2d e2 = ellipse_from_conic(project_ellipsoid(sym.camera2(), s));
    CHECK((e1.center - e2.center).norm() < 1e-9);
    const Ellipsoidd e = init_ellipsoid(sym, e1, e1);
    CHECK((e.semi_axes.maxCoeff() - e.semi_axes.minCoeff()) / e.semi_axes.mean() < 0.01);
  }
  SUBCASE("random bubbles") {
    std::mt19937 rng(4);
    for (int i = 0; i < 50; ++i) {
      const Ellipsoidd b = bubble(rng, std::uniform_real_distribution<double>(2, 12)(rng));
      const Ellipsoidd e = init_ellipsoid(rig(), outline_ellipse(1, b), outline_ellipse(2, b));
      CHECK((e.center - b.center).norm() < 0.1);
      CHECK(std::abs(e.volume() / b.volume() - 1) < 0.02);
    }
  }
  SUBCASE("parallel viewing rays") {
    StereoRigd parallel = rig();
    parallel.pose2 = Posed{Eigen::Matrix3d::Identity(), Eigen::Vector3d(-100, 0, 0)};
    const Ellipse2d far{{584.49, 362.619}, 10, 8, 0};
    const Ellipse2d shifted{{584.49 - 1e-12, 362.619}, 10, 8, 0};
    CHECK_THROWS_AS(init_ellipsoid(parallel, far, shifted), Error);
  }
}

TEST_CASE("refine_ellipsoid") {
  std::mt19937 rng(8);
  std::normal_distribution<double> n(0, 1);

  SUBCASE("5% perturbation: silhouettes and pencil recovered, cost monotone") {
    for (int i = 0; i < 30; ++i) {
      const Ellipsoidd truth = canonical(bubble(rng, std::uniform_real_distribution<double>(3, 14)(rng)));
      const auto c1 = outline(1, truth);
      const auto c2 = outline(2, truth);
      Ellipsoidd e0 = truth;
      e0.center += 0.05 * truth.semi_axes.mean() * Eigen::Vector3d(n(rng), n(rng), n(rng));
      e0.semi_axes *= 1.05;
      e0.orientation = rotation_from_axis_angle<double>(0.03 * Eigen::Vector3d(n(rng), n(rng), n(rng))) *
                       truth.orientation;
      const RefineResult r = refine_ellipsoid(rig(), e0, c1, c2);
      CHECK(r.summary.final_cost <= r.summary.initial_cost);
      CHECK(r.rms_px < 1e-5);
      CHECK(pencil_residual(r.ellipsoid, truth) < 1e-5);
      // The outlines themselves are recovered to 0.1%.
      for (int cam : {1, 2}) {
        const Ellipse2d a = outline_ellipse(cam, r.ellipsoid);
        const Ellipse2d b = outline_ellipse(cam, truth);
        CHECK((a.center - b.center).norm() < 1e-3 * b.major);
        CHECK(std::abs(a.major / b.major - 1) < 1e-3);
        CHECK(std::abs(a.minor / b.minor - 1) < 1e-3);
      }
    }
  }

  SUBCASE("from init_ellipsoid the whole ellipsoid is recovered") {
    for (int i = 0; i < 30; ++i) {
      const Ellipsoidd truth = bubble(rng, std::uniform_real_distribution<double>(3, 14)(rng));
      const auto c1 = outline(1, truth);
      const auto c2 = outline(2, truth);
      const Ellipsoidd e0 = init_ellipsoid(rig(), outline_ellipse(1, truth), outline_ellipse(2, truth));
      const RefineResult r = refine_ellipsoid(rig(), e0, c1, c2);
      CHECK(r.converged);
      CHECK(r.rms_px < 1e-6);
      CHECK((r.ellipsoid.center - truth.center).norm() < 0.01);
      CHECK(std::abs(r.ellipsoid.volume() / truth.volume() - 1) < 0.005);
    }
  }

  SUBCASE("optimal start is a fixed point") {
    const Ellipsoidd truth = bubble(rng, 6);
    const RefineResult r = refine_ellipsoid(rig(), truth, outline(1, truth), outline(2, truth));
    CHECK(r.summary.initial_cost - r.summary.final_cost < 1e-12);
    CHECK((r.ellipsoid.center - truth.center).norm() < 1e-9);
    CHECK(relative_axis_error(r.ellipsoid, truth) < 1e-9);
  }

  SUBCASE("contour noise of 0.3 px keeps the equivalent diameter within 2%") {
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      const double d = std::uniform_real_distribution<double>(4, 12)(rng);
      const Ellipsoidd truth = bubble(rng, d);
      auto c1 = outline(1, truth);
      auto c2 = outline(2, truth);
      for (auto* c : {&c1, &c2})
        for (auto& x : *c) x += 0.3 * Eigen::Vector2d(n(rng), n(rng));
      const Ellipsoidd e0 =
          init_ellipsoid(rig(), ellipse_from_conic(*fit_ellipse(c1)), ellipse_from_conic(*fit_ellipse(c2)));
      const RefineResult r = refine_ellipsoid(rig(), e0, c1, c2);
      worst = std::max(worst, std::abs(r.ellipsoid.equivalent_diameter() / truth.equivalent_diameter() - 1));
    }
    CHECK(worst <= 0.02);
  }

  SUBCASE("too few points") {
    const Ellipsoidd truth = bubble(rng, 6);
    const auto c1 = outline(1, truth);
    const std::vector<Eigen::Vector2d> few(c1.begin(), c1.begin() + 5);
    CHECK_THROWS_AS(refine_ellipsoid(rig(), truth, few, c1), Error);
  }
}

TEST_CASE("silhouette cost is invariant to a joint scale of bubbles and baseline") {
  std::mt19937 rng(12);
  const Ellipsoidd truth = bubble(rng, 6);
  const auto c1 = outline(1, truth);
  const auto c2 = outline(2, truth);
  for (double s : {0.5, 1.7}) {
    StereoRigd scaled = rig();
    scaled.pose2.translation *= s;
    Ellipsoidd e = truth;
    e.center *= s;
    e.semi_axes *= s;
    CHECK(silhouette_residuals(scaled, e, c1, c2).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("self_calibrate") {
  std::mt19937 rng(5);
  std::normal_distribution<double> n(0, 1);
  auto observations = [&](int count, double sigma) {
    std::vector<SilhouettePair> obs;
    for (int i = 0; i < count; ++i) {
      const Ellipsoidd b = bubble(rng, std::uniform_real_distribution<double>(3, 10)(rng));
      SilhouettePair p{outline(1, b), outline(2, b)};
      for (auto* c : {&p.view1, &p.view2})
        for (auto& x : *c) x += sigma * Eigen::Vector2d(n(rng), n(rng));
      obs.push_back(std::move(p));
    }
    return obs;
  };

  SUBCASE("recovers the rig from a 0.6 degree / 3 mm perturbation") {
    const StereoRigd perturbed = table2_perturbation(rig());
    CHECK(held_out_epipolar_error(rig(), perturbed, 1) > 3.0);
    const SelfCalibrationResult clean = self_calibrate(perturbed, observations(50, 0.0));
    CHECK(clean.used.size() == 50);
    CHECK(held_out_epipolar_error(rig(), clean.rig, 1) < 0.2);
    CHECK(clean.rig.baseline() == doctest::Approx(rig().baseline()).epsilon(1e-12));
    const SelfCalibrationResult noisy = self_calibrate(perturbed, observations(50, 0.3));
    CHECK(held_out_epipolar_error(rig(), noisy.rig, 1) < 1.0);
  }

  SUBCASE("the true rig is a fixed point") {
    const SelfCalibrationResult r = self_calibrate(rig(), observations(20, 0.0));
    CHECK((r.rig.pose2.rotation - rig().pose2.rotation).norm() < 1e-6);
    CHECK((r.rig.pose2.translation - rig().pose2.translation).norm() < 1e-6);
  }

  SUBCASE("too few bubbles") {
    try {
      self_calibrate(rig(), observations(2, 0.0));
      FAIL("expected underconstrained");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Underconstrained);
    }
  }

  SUBCASE("collinear bubbles") {
    std::vector<SilhouettePair> obs;
    for (int i = 0; i < 12; ++i) {
      Ellipsoidd b = bubble(rng, 5);
      b.center = {0, 30.0 - 5.0 * i, 302};
      obs.push_back({outline(1, b), outline(2, b)});
    }
    CHECK_THROWS_AS(self_calibrate(rig(), obs), Error);
  }
}

TEST_CASE("apply_rig_update keeps the baseline length") {
  const StereoRigd r = apply_rig_update(rig(), Eigen::Vector3d(0.01, -0.02, 0.005), Eigen::Vector2d(3, -4));
  CHECK(r.baseline() == doctest::Approx(rig().baseline()).epsilon(1e-14));
  CHECK(r.pose2.orthonormality_error() < 1e-12);
  const StereoRigd same = apply_rig_update(rig(), Eigen::Vector3d::Zero(), Eigen::Vector2d::Zero());
  CHECK((same.pose2.translation - rig().pose2.translation).norm() < 1e-12);
}
