#pragma once

// 2D ellipses as symmetric 3x3 conic matrices (xᵀ C x = 0 on the curve) and
// in parametric form, plus the direct least-squares ellipse fit.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "bubblestream/geometry.hpp"

namespace bubblestream {

/// Parametric ellipse: centre, semi-axes (major >= minor) and the angle of the
/// major axis measured from the image u axis, in (-pi/2, pi/2].
struct Ellipse2d {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double major = 1.0;
  double minor = 1.0;
  double angle = 0.0;

  double area() const { return M_PI * major * minor; }
  Eigen::Vector2d point_at(double t) const;
  Eigen::Vector2d major_direction() const { return {std::cos(angle), std::sin(angle)}; }
  Eigen::Vector2d minor_direction() const { return {-std::sin(angle), std::cos(angle)}; }
};

/// Conic matrix scaled to unit Frobenius norm with the leading 2x2 block
/// positive definite for ellipses, so interior points give xᵀCx < 0.
template <typename S>
Matrix3<S> normalize_conic(const Matrix3<S>& C) {
  using std::sqrt;
  Matrix3<S> c = S(0.5) * (C + C.transpose());
  const S n = sqrt(c.squaredNorm());
  if (n > S(0)) c /= n;
  if (c(0, 0) + c(1, 1) < S(0)) c = -c;
  return c;
}

/// First-order (Sampson) distance of a point to the conic, in pixels.
/// Invariant to the scale of C.
template <typename S>
S sampson_distance(const Matrix3<S>& C, const Vector2<S>& x) {
  using std::sqrt;
  const Vector3<S> xh(x.x(), x.y(), S(1));
  const Vector3<S> Cx = C * xh;
  const S f = xh.dot(Cx);
  const S g = S(2) * sqrt(Cx.x() * Cx.x() + Cx.y() * Cx.y());
  return f / g;
}

template <typename Scalar>
class Conic {
 public:
  Conic() = default;
  explicit Conic(const Matrix3<Scalar>& C) : C_(normalize_conic<Scalar>(C)) {}

  const Matrix3<Scalar>& matrix() const { return C_; }

  /// Dual conic C* = C⁻¹ (tangent lines l satisfy lᵀ C* l = 0).
  Matrix3<Scalar> dual() const { return C_.inverse(); }

  /// True for a real, non-degenerate ellipse.
  bool is_ellipse() const {
    const Scalar d2 = C_(0, 0) * C_(1, 1) - C_(0, 1) * C_(1, 0);
    return d2 > Scalar(0) && C_.determinant() < Scalar(0);
  }

  Scalar algebraic(const Vector2<Scalar>& x) const {
    return x.homogeneous().dot(C_ * x.homogeneous());
  }

  Scalar sampson(const Vector2<Scalar>& x) const { return sampson_distance<Scalar>(C_, x); }

  template <typename T>
  Conic<T> cast() const {
    return Conic<T>(C_.template cast<T>());
  }

 private:
  Matrix3<Scalar> C_ = Matrix3<Scalar>::Identity();
};

using Conicd = Conic<double>;

Conicd conic_from_ellipse(const Ellipse2d& e);

/// Throws Error(NotAnEllipsoid) unless the conic is a real ellipse.
Ellipse2d ellipse_from_conic(const Conicd& c);

/// `count` points uniformly spaced in the parametric angle.
std::vector<Eigen::Vector2d> sample_ellipse(const Ellipse2d& e, int count = 64);

/// Direct least-squares fit constrained to ellipses (numerically stable
/// variant with data normalization). Returns nullopt for fewer than five
/// points or when no ellipse solution exists.
std::optional<Conicd> fit_ellipse(std::span<const Eigen::Vector2d> points);

/// Root-mean-square Sampson distance of the points to the conic.
double rms_sampson(const Conicd& c, std::span<const Eigen::Vector2d> points);

}  // namespace bubblestream
