#pragma once

// Shared fixtures for the unit tests: random ellipsoids in the rise corridor
// and exact silhouette points computed from the tangent-cone geometry.

#include <random>
#include <vector>

#include <Eigen/Geometry>

#include "bubblestream/geometry.hpp"
#include "bubblestream/quadric.hpp"

namespace bubblestream::testing {

template <typename Rng>
Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Axes in [0.5, 10] mm, centre inside the 80 mm corridor around z = 302 mm.
template <typename Rng>
Ellipsoidd random_ellipsoid(Rng& rng) {
  std::uniform_real_distribution<double> axis(0.5, 10.0), lateral(-40, 40), depth(262, 342);
  Ellipsoidd e;
  e.center = {lateral(rng), lateral(rng), depth(rng)};
  e.orientation = random_rotation(rng);
  e.semi_axes = {axis(rng), axis(rng), axis(rng)};
  return e;
}

/// Points where viewing rays touch the ellipsoid, projected with the camera's
/// ideal pinhole. In unit-sphere coordinates the contact set is the circle
/// u·c = 1 for the transformed camera centre c.
inline std::vector<Eigen::Vector2d> silhouette_points(const Camerad& cam, const Ellipsoidd& e, int count) {
  const Eigen::Matrix3d D = e.orientation * e.semi_axes.asDiagonal();
  const Eigen::Vector3d c = D.inverse() * (cam.center() - e.center);
  const double n2 = c.squaredNorm();
  const Eigen::Vector3d middle = c / n2;
  const double radius = std::sqrt(1.0 - 1.0 / n2);
  Eigen::Vector3d a = c.unitOrthogonal();
  Eigen::Vector3d b = c.normalized().cross(a);
  std::vector<Eigen::Vector2d> out;
  const Eigen::Matrix<double, 3, 4> P = cam.projection_matrix();
  for (int i = 0; i < count; ++i) {
    const double t = 2.0 * M_PI * i / count;
    const Eigen::Vector3d u = middle + radius * (std::cos(t) * a + std::sin(t) * b);
    const Eigen::Vector3d X = e.center + D * u;
    out.push_back((P * X.homogeneous()).hnormalized());
  }
  return out;
}

}  // namespace bubblestream::testing
