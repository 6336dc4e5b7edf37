#include "bubblestream/geometry.hpp"

namespace bubblestream {

Ray back_project(const Camerad& camera, const Eigen::Vector2d& pixel) {
  const auto& in = camera.intrinsics;
  const Eigen::Vector2d xn = undistort(in, in.to_normalized(pixel));
  const Eigen::Vector3d d_cam = Eigen::Vector3d(xn.x(), xn.y(), 1.0).normalized();
  return Ray{camera.center(), (camera.pose.rotation.transpose() * d_cam).normalized()};
}

Triangulation triangulate_midpoint(const Ray& r1, const Ray& r2) {
  const Eigen::Vector3d w = r1.origin - r2.origin;
  const double b = r1.direction.dot(r2.direction);
  const double denom = 1.0 - b * b;  // sin² of the angle between the rays
  if (denom < 1e-18)
    throw Error(ErrorCode::DegenerateTriangulation, "rays are parallel");
  const double d = r1.direction.dot(w);
  const double e = r2.direction.dot(w);
  const double s = (b * e - d) / denom;
  const double t = (e - b * d) / denom;
  const Eigen::Vector3d p1 = r1.point_at(s);
  const Eigen::Vector3d p2 = r2.point_at(t);
  return {0.5 * (p1 + p2), (p1 - p2).norm()};
}

Eigen::Matrix3d fundamental_matrix(const StereoRigd& rig) {
  const Eigen::Matrix3d E = skew<double>(rig.pose2.translation) * rig.pose2.rotation;
  return rig.cam2.K_inverse().transpose() * E * rig.cam1.K_inverse();
}

namespace {

Eigen::Vector3d normalized_line(const Eigen::Vector3d& l) {
  const double n = l.head<2>().norm();
  return n > 0.0 ? Eigen::Vector3d(l / n) : l;
}

}  // namespace

Eigen::Vector3d epipolar_line(const StereoRigd& rig, const Eigen::Vector2d& x1) {
  return normalized_line(fundamental_matrix(rig) * x1.homogeneous());
}

Eigen::Vector3d epipolar_line_in_first(const StereoRigd& rig, const Eigen::Vector2d& x2) {
  return normalized_line(fundamental_matrix(rig).transpose() * x2.homogeneous());
}

double epipolar_distance(const Eigen::Matrix3d& F, const Eigen::Vector2d& x1, const Eigen::Vector2d& x2) {
  const Eigen::Vector3d l2 = normalized_line(F * x1.homogeneous());
  const Eigen::Vector3d l1 = normalized_line(F.transpose() * x2.homogeneous());
  return 0.5 * (std::abs(l2.dot(x2.homogeneous())) + std::abs(l1.dot(x1.homogeneous())));
}

double epipolar_distance(const StereoRigd& rig, const Eigen::Vector2d& x1, const Eigen::Vector2d& x2) {
  return epipolar_distance(fundamental_matrix(rig), x1, x2);
}

}  // namespace bubblestream
