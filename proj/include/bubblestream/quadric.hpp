#pragma once

// Ellipsoids as 4x4 point quadrics (X̃ᵀ Q X̃ = 0 on the surface) and their
// projection to image conics through the dual forms C* = P Q* Pᵀ.

#include <cmath>

#include <Eigen/Core>
#include <Eigen/LU>

#include "bubblestream/conic.hpp"
#include "bubblestream/geometry.hpp"

namespace bubblestream {

template <typename Scalar>
struct Ellipsoid {
  Vector3<Scalar> center = Vector3<Scalar>::Zero();
  /// Columns are the directions of the three semi-axes (a proper rotation).
  Matrix3<Scalar> orientation = Matrix3<Scalar>::Identity();
  Vector3<Scalar> semi_axes = Vector3<Scalar>::Ones();

  Scalar volume() const {
    return Scalar(4.0 / 3.0 * M_PI) * semi_axes[0] * semi_axes[1] * semi_axes[2];
  }

  /// Diameter of the sphere with the same volume.
  Scalar equivalent_diameter() const {
    using std::cbrt;
    return Scalar(2) * cbrt(semi_axes[0] * semi_axes[1] * semi_axes[2]);
  }

  Scalar max_semi_axis() const { return semi_axes.maxCoeff(); }

  /// H maps the unit sphere onto the ellipsoid: X = R diag(a,b,c) u + t.
  Matrix4<Scalar> point_transform() const {
    Matrix4<Scalar> H = Matrix4<Scalar>::Identity();
    H.template topLeftCorner<3, 3>() = orientation * semi_axes.asDiagonal();
    H.template topRightCorner<3, 1>() = center;
    return H;
  }

  /// Q* = H diag(1,1,1,-1) Hᵀ; needs no matrix inversion.
  Matrix4<Scalar> dual_quadric() const {
    const Matrix4<Scalar> H = point_transform();
    const Vector4<Scalar> unit(Scalar(1), Scalar(1), Scalar(1), Scalar(-1));
    return H * unit.asDiagonal() * H.transpose();
  }

  template <typename T>
  Ellipsoid<T> cast() const {
    return {center.template cast<T>(), orientation.template cast<T>(), semi_axes.template cast<T>()};
  }

  void validate() const;
};

using Ellipsoidd = Ellipsoid<double>;

template <>
void Ellipsoid<double>::validate() const;

template <typename Scalar>
struct Quadric {
  Matrix4<Scalar> Q = Vector4<Scalar>(Scalar(1), Scalar(1), Scalar(1), Scalar(-1)).asDiagonal();

  /// Symmetrized and scaled to unit Frobenius norm.
  Quadric normalized() const {
    using std::sqrt;
    Quadric out{Scalar(0.5) * (Q + Q.transpose())};
    const Scalar n = sqrt(out.Q.squaredNorm());
    if (n > Scalar(0)) out.Q /= n;
    return out;
  }

  Matrix4<Scalar> dual() const { return Q.inverse(); }

  Scalar algebraic(const Vector3<Scalar>& X) const {
    const Vector4<Scalar> Xh = X.homogeneous();
    return Xh.dot(Q * Xh);
  }
};

using Quadricd = Quadric<double>;

/// Q = H⁻ᵀ diag(1,1,1,-1) H⁻¹, with H⁻¹ written out in closed form.
template <typename S>
Quadric<S> ellipsoid_to_quadric(const Ellipsoid<S>& e) {
  const Matrix3<S> Dinv =
      e.semi_axes.cwiseInverse().asDiagonal() * e.orientation.transpose();
  Matrix4<S> Hinv = Matrix4<S>::Identity();
  Hinv.template topLeftCorner<3, 3>() = Dinv;
  Hinv.template topRightCorner<3, 1>() = -Dinv * e.center;
  const Vector4<S> unit(S(1), S(1), S(1), S(-1));
  return Quadric<S>{Hinv.transpose() * unit.asDiagonal() * Hinv};
}

/// Semi-axes sorted in descending order, orientation columns permuted to
/// match, each of the first two columns signed so its largest-magnitude entry
/// is positive, third column = first x second.
Ellipsoidd canonical(const Ellipsoidd& e);

/// Recovers centre, orientation and semi-axes (canonical order). Throws
/// Error(NotAnEllipsoid) for paraboloids, hyperboloids, imaginary or
/// rank-deficient quadrics.
Ellipsoidd quadric_to_ellipsoid(const Quadricd& q);

/// C* = P Q* Pᵀ for any scalar type; the building block of the adjustment.
template <typename S>
Matrix3<S> project_dual_quadric(const Matrix34<S>& P, const Matrix4<S>& Qstar) {
  return P * Qstar * P.transpose();
}

/// Adjugate of a 3x3 matrix (proportional to the inverse; no division).
template <typename S>
Matrix3<S> adjugate(const Matrix3<S>& m) {
  Matrix3<S> a;
  a(0, 0) = m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1);
  a(0, 1) = m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2);
  a(0, 2) = m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1);
  a(1, 0) = m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2);
  a(1, 1) = m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0);
  a(1, 2) = m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2);
  a(2, 0) = m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0);
  a(2, 1) = m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1);
  a(2, 2) = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return a;
}

/// Outline conic of a quadric seen through projection matrix P. Throws
/// Error(DegenerateProjection) when the camera centre is not well outside the
/// ellipsoid (distance <= 3 x largest semi-axis) or the ellipsoid reaches the
/// principal plane, and Error(NotAnEllipsoid) when Q is not an ellipsoid.
Conicd project_quadric(const Eigen::Matrix<double, 3, 4>& P, const Quadricd& q);

/// Convenience overload for an ideal (distortion-free) camera.
Conicd project_ellipsoid(const Camerad& camera, const Ellipsoidd& e);

}  // namespace bubblestream
