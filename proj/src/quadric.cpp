#include "bubblestream/quadric.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace bubblestream {

template <>
void Ellipsoid<double>::validate() const {
  if (!(semi_axes.minCoeff() > 0.0))
    throw Error(ErrorCode::InvalidArgument, "semi-axes must be positive");
  if ((orientation.transpose() * orientation - Eigen::Matrix3d::Identity()).norm() > 1e-9 ||
      orientation.determinant() < 0.0)
    throw Error(ErrorCode::InvalidArgument, "orientation is not a proper rotation");
}

Ellipsoidd canonical(const Ellipsoidd& e) {
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return e.semi_axes[i] > e.semi_axes[j]; });
  Ellipsoidd out;
  out.center = e.center;
  for (int k = 0; k < 3; ++k) {
    out.semi_axes[k] = e.semi_axes[order[k]];
    out.orientation.col(k) = e.orientation.col(order[k]);
  }
  for (int k = 0; k < 2; ++k) {
    Eigen::Index idx = 0;
    out.orientation.col(k).cwiseAbs().maxCoeff(&idx);
    if (out.orientation(idx, k) < 0.0) out.orientation.col(k) = -out.orientation.col(k);
  }
  out.orientation.col(2) = out.orientation.col(0).cross(out.orientation.col(1));
  return out;
}

Ellipsoidd quadric_to_ellipsoid(const Quadricd& q) {
  Eigen::Matrix4d Q = q.normalized().Q;
  if (!Q.allFinite()) throw Error(ErrorCode::NotAnEllipsoid, "non-finite quadric");
  Eigen::Matrix3d A = Q.topLeftCorner<3, 3>();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> signs(A, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = signs.eigenvalues();
  const double scale = ev.cwiseAbs().maxCoeff();
  if (!(scale > 0.0)) throw Error(ErrorCode::NotAnEllipsoid, "rank-deficient quadric");
  if (ev.maxCoeff() < 0.0) {
    Q = -Q;
    A = -A;
  } else if (!(ev.minCoeff() > 1e-14 * scale)) {
    throw Error(ErrorCode::NotAnEllipsoid, "leading block is not definite");
  }
  const Eigen::Vector3d b = Q.topRightCorner<3, 1>();
  const Eigen::LLT<Eigen::Matrix3d> llt(A);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::NotAnEllipsoid, "leading block is not definite");

  Ellipsoidd e;
  e.center = -llt.solve(b);
  const double d = Q(3, 3) + b.dot(e.center);
  if (!(d < 0.0)) throw Error(ErrorCode::NotAnEllipsoid, "quadric has no real points");

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(A / (-d));
  const Eigen::Vector3d lambda = es.eigenvalues();  // ascending -> semi-axes descending
  for (int k = 0; k < 3; ++k) e.semi_axes[k] = 1.0 / std::sqrt(lambda[k]);
  e.orientation = es.eigenvectors();
  return canonical(e);
}

namespace {

Eigen::Vector4d camera_center(const Eigen::Matrix<double, 3, 4>& P) {
  Eigen::Vector4d c;
  for (int i = 0; i < 4; ++i) {
    Eigen::Matrix3d m;
    int col = 0;
    for (int j = 0; j < 4; ++j)
      if (j != i) m.col(col++) = P.col(j);
    c[i] = ((i % 2 == 0) ? 1.0 : -1.0) * m.determinant();
  }
  return c;
}

}  // namespace

Conicd project_quadric(const Eigen::Matrix<double, 3, 4>& P, const Quadricd& q) {
  const Ellipsoidd e = quadric_to_ellipsoid(q);
  const Eigen::Vector4d ch = camera_center(P);
  if (std::abs(ch[3]) < 1e-300)
    throw Error(ErrorCode::DegenerateProjection, "camera at infinity");
  const Eigen::Vector3d c = ch.head<3>() / ch[3];
  const double r = e.max_semi_axis();
  if (!((c - e.center).norm() > 3.0 * r))
    throw Error(ErrorCode::DegenerateProjection, "camera too close to the ellipsoid");

  const Eigen::Matrix3d M = P.leftCols<3>();
  const double depth_sign = M.determinant() > 0.0 ? 1.0 : -1.0;
  const double depth =
      depth_sign * P.row(2).dot(e.center.homogeneous()) / M.row(2).norm();
  if (!(depth > r))
    throw Error(ErrorCode::DegenerateProjection, "ellipsoid reaches the principal plane");

  // Work in a frame centred on the ellipsoid and on its image, scaled to
  // unit focal length; the dual conic is then well conditioned to invert.
  const Eigen::Vector2d m = (P * e.center.homogeneous()).hnormalized();
  const double s = M.topRows<2>().norm() / M.row(2).norm();
  Eigen::Matrix3d T = Eigen::Matrix3d::Identity();
  T(0, 0) = T(1, 1) = 1.0 / s;
  T.topRightCorner<2, 1>() = -m / s;
  Eigen::Matrix4d shift = Eigen::Matrix4d::Identity();
  shift.topRightCorner<3, 1>() = e.center;
  Ellipsoidd centred = e;
  centred.center.setZero();
  const Eigen::Matrix<double, 3, 4> Pn = T * P * shift;
  const Eigen::Matrix3d Cn = project_dual_quadric<double>(Pn, centred.dual_quadric()).inverse();
  Conicd conic(T.transpose() * Cn * T);
  if (!conic.is_ellipse())
    throw Error(ErrorCode::DegenerateProjection, "outline is not an ellipse");
  return conic;
}

Conicd project_ellipsoid(const Camerad& camera, const Ellipsoidd& e) {
  return project_quadric(camera.projection_matrix(), ellipsoid_to_quadric(e));
}

}  // namespace bubblestream
