#pragma once

// Perspective camera model with Brown-Conrady distortion, stereo rig, and the
// epipolar/triangulation primitives shared by every other stage. Units are
// millimetres in 3D and pixels in 2D throughout.

#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "bubblestream/error.hpp"

namespace bubblestream {

template <typename S> using Vector2 = Eigen::Matrix<S, 2, 1>;
template <typename S> using Vector3 = Eigen::Matrix<S, 3, 1>;
template <typename S> using Vector4 = Eigen::Matrix<S, 4, 1>;
template <typename S> using Matrix2 = Eigen::Matrix<S, 2, 2>;
template <typename S> using Matrix3 = Eigen::Matrix<S, 3, 3>;
template <typename S> using Matrix4 = Eigen::Matrix<S, 4, 4>;
template <typename S> using Matrix34 = Eigen::Matrix<S, 3, 4>;

template <typename S>
Matrix3<S> skew(const Vector3<S>& v) {
  Matrix3<S> m;
  m << S(0), -v.z(), v.y(),
       v.z(), S(0), -v.x(),
       -v.y(), v.x(), S(0);
  return m;
}

/// Rodrigues' formula; falls back to the first-order form near zero so that
/// derivatives stay exact when Scalar is an autodiff type.
template <typename S>
Matrix3<S> rotation_from_axis_angle(const Vector3<S>& w) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const S theta2 = w.squaredNorm();
  if (theta2 > S(1e-20)) {
    const S theta = sqrt(theta2);
    const Vector3<S> k = w / theta;
    const Matrix3<S> K = skew<S>(k);
    return Matrix3<S>::Identity() + sin(theta) * K + (S(1) - cos(theta)) * (K * K);
  }
  return Matrix3<S>::Identity() + skew<S>(w);
}

inline Eigen::Vector3d axis_angle_from_rotation(const Eigen::Matrix3d& R) {
  const Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

template <typename Scalar>
struct Intrinsics {
  Scalar fx{1};
  Scalar fy{1};
  Scalar cx{0};
  Scalar cy{0};
  Scalar k1{0};
  Scalar k2{0};
  Scalar p1{0};
  Scalar p2{0};

  Matrix3<Scalar> K() const {
    Matrix3<Scalar> k = Matrix3<Scalar>::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }

  Matrix3<Scalar> K_inverse() const {
    Matrix3<Scalar> k = Matrix3<Scalar>::Identity();
    k(0, 0) = Scalar(1) / fx;
    k(1, 1) = Scalar(1) / fy;
    k(0, 2) = -cx / fx;
    k(1, 2) = -cy / fy;
    return k;
  }

  bool has_distortion() const {
    return k1 != Scalar(0) || k2 != Scalar(0) || p1 != Scalar(0) || p2 != Scalar(0);
  }

  /// Same focal lengths and principal point, no lens distortion.
  Intrinsics pinhole() const {
    Intrinsics c = *this;
    c.k1 = c.k2 = c.p1 = c.p2 = Scalar(0);
    return c;
  }

  Vector2<Scalar> to_normalized(const Vector2<Scalar>& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy};
  }

  Vector2<Scalar> to_pixel(const Vector2<Scalar>& xn) const {
    return {fx * xn.x() + cx, fy * xn.y() + cy};
  }

  template <typename T>
  Intrinsics<T> cast() const {
    return {T(fx), T(fy), T(cx), T(cy), T(k1), T(k2), T(p1), T(p2)};
  }

  void validate() const {
    if (!(fx > Scalar(0)) || !(fy > Scalar(0)))
      throw Error(ErrorCode::InvalidArgument, "focal lengths must be positive");
  }
};

/// Brown-Conrady distortion in normalized image coordinates.
template <typename S>
Vector2<S> distort(const Intrinsics<S>& in, const Vector2<S>& xn) {
  const S x = xn.x();
  const S y = xn.y();
  const S r2 = x * x + y * y;
  const S radial = S(1) + in.k1 * r2 + in.k2 * r2 * r2;
  return {x * radial + S(2) * in.p1 * x * y + in.p2 * (r2 + S(2) * x * x),
          y * radial + in.p1 * (r2 + S(2) * y * y) + S(2) * in.p2 * x * y};
}

/// Inverse of distort() by fixed-point iteration (at most 20 steps, step
/// tolerance 1e-8 in normalized coordinates).
template <typename S>
Vector2<S> undistort(const Intrinsics<S>& in, const Vector2<S>& xd) {
  using std::abs;
  Vector2<S> x = xd;
  for (int it = 0; it < 20; ++it) {
    const S r2 = x.squaredNorm();
    const S radial = S(1) + in.k1 * r2 + in.k2 * r2 * r2;
    const S dx = S(2) * in.p1 * x.x() * x.y() + in.p2 * (r2 + S(2) * x.x() * x.x());
    const S dy = in.p1 * (r2 + S(2) * x.y() * x.y()) + S(2) * in.p2 * x.x() * x.y();
    const Vector2<S> next((xd.x() - dx) / radial, (xd.y() - dy) / radial);
    const S step = abs(next.x() - x.x()) + abs(next.y() - x.y());
    x = next;
    if (step < S(1e-8)) break;
  }
  return x;
}

/// Ideal (undistorted) pixel -> raw sensor pixel.
template <typename S>
Vector2<S> distort_pixel(const Intrinsics<S>& in, const Vector2<S>& px) {
  return in.to_pixel(distort(in, in.to_normalized(px)));
}

/// Raw sensor pixel -> ideal (undistorted) pixel.
template <typename S>
Vector2<S> undistort_pixel(const Intrinsics<S>& in, const Vector2<S>& px) {
  return in.to_pixel(undistort(in, in.to_normalized(px)));
}

/// World-to-camera rigid transform: X_cam = rotation * X_world + translation.
template <typename Scalar>
struct Pose {
  Matrix3<Scalar> rotation = Matrix3<Scalar>::Identity();
  Vector3<Scalar> translation = Vector3<Scalar>::Zero();

  static Pose identity() { return Pose{}; }

  /// Quaternion given as (w, x, y, z); it is normalized first.
  static Pose from_quaternion(const Vector4<Scalar>& wxyz, const Vector3<Scalar>& t) {
    Eigen::Quaternion<Scalar> q(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    q.normalize();
    return Pose{q.toRotationMatrix(), t};
  }

  Vector4<Scalar> quaternion_wxyz() const {
    Eigen::Quaternion<Scalar> q(rotation);
    q.normalize();
    if (q.w() < Scalar(0)) q.coeffs() = -q.coeffs();
    return {q.w(), q.x(), q.y(), q.z()};
  }

  Vector3<Scalar> transform(const Vector3<Scalar>& X) const { return rotation * X + translation; }

  Vector3<Scalar> center() const { return -rotation.transpose() * translation; }

  Matrix34<Scalar> matrix() const {
    Matrix34<Scalar> m;
    m.template leftCols<3>() = rotation;
    m.col(3) = translation;
    return m;
  }

  template <typename T>
  Pose<T> cast() const {
    return Pose<T>{rotation.template cast<T>(), translation.template cast<T>()};
  }

  double orthonormality_error() const {
    return (rotation.transpose() * rotation - Matrix3<Scalar>::Identity()).norm();
  }
};

template <typename Scalar>
struct Camera {
  Intrinsics<Scalar> intrinsics;
  Pose<Scalar> pose;

  Camera pinhole() const { return {intrinsics.pinhole(), pose}; }

  /// K [R | t]; maps homogeneous world points to ideal (undistorted) pixels.
  Matrix34<Scalar> projection_matrix() const { return intrinsics.K() * pose.matrix(); }

  Vector3<Scalar> center() const { return pose.center(); }
};

/// Two-camera rig whose first camera defines the world frame.
template <typename Scalar>
struct StereoRig {
  Intrinsics<Scalar> cam1;
  Intrinsics<Scalar> cam2;
  Pose<Scalar> pose2;

  Camera<Scalar> camera1() const { return {cam1, Pose<Scalar>::identity()}; }
  Camera<Scalar> camera2() const { return {cam2, pose2}; }
  Camera<Scalar> camera(int id) const { return id == 1 ? camera1() : camera2(); }

  Scalar baseline() const { return pose2.translation.norm(); }

  StereoRig pinhole() const { return {cam1.pinhole(), cam2.pinhole(), pose2}; }

  void validate() const {
    cam1.validate();
    cam2.validate();
    if (pose2.orthonormality_error() > 1e-9 || pose2.rotation.determinant() < Scalar(0))
      throw Error(ErrorCode::InvalidArgument, "pose2 rotation is not a proper rotation");
    if (!(baseline() > Scalar(0))) throw Error(ErrorCode::InvalidArgument, "zero baseline");
  }
};

using Intrinsicsd = Intrinsics<double>;
using Posed = Pose<double>;
using Camerad = Camera<double>;
using StereoRigd = StereoRig<double>;

/// Projects a world point to raw (distorted) pixel coordinates.
template <typename S>
Vector2<S> project(const Camera<S>& camera, const Vector3<S>& X) {
  const Vector3<S> Xc = camera.pose.transform(X);
  if (!(Xc.z() > S(0))) throw Error(ErrorCode::BehindCamera, "point has non-positive depth");
  const Vector2<S> xn(Xc.x() / Xc.z(), Xc.y() / Xc.z());
  return camera.intrinsics.to_pixel(distort(camera.intrinsics, xn));
}

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit length

  Eigen::Vector3d point_at(double distance) const { return origin + distance * direction; }
};

/// Viewing ray through a raw pixel (lens distortion removed first).
Ray back_project(const Camerad& camera, const Eigen::Vector2d& pixel);

struct Triangulation {
  Eigen::Vector3d point;
  double gap = 0.0;  // length of the mutual perpendicular, mm
};

/// Midpoint of the common perpendicular of two rays.
Triangulation triangulate_midpoint(const Ray& r1, const Ray& r2);

/// F with x2ᵀ F x1 = 0 for ideal pixels of camera 1 and camera 2.
Eigen::Matrix3d fundamental_matrix(const StereoRigd& rig);

/// Epipolar line in image 2 of an ideal pixel of image 1, scaled so a²+b²=1.
Eigen::Vector3d epipolar_line(const StereoRigd& rig, const Eigen::Vector2d& x1);

/// Epipolar line in image 1 of an ideal pixel of image 2, scaled so a²+b²=1.
Eigen::Vector3d epipolar_line_in_first(const StereoRigd& rig, const Eigen::Vector2d& x2);

/// Symmetric epipolar distance: mean of the two point-to-line distances (px).
double epipolar_distance(const StereoRigd& rig, const Eigen::Vector2d& x1, const Eigen::Vector2d& x2);

/// Same as above with a precomputed fundamental matrix.
double epipolar_distance(const Eigen::Matrix3d& F, const Eigen::Vector2d& x1, const Eigen::Vector2d& x2);

}  // namespace bubblestream
