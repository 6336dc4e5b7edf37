#include "bubblestream/conic.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

namespace bubblestream {

Eigen::Vector2d Ellipse2d::point_at(double t) const {
  return center + major * std::cos(t) * major_direction() + minor * std::sin(t) * minor_direction();
}

Conicd conic_from_ellipse(const Ellipse2d& e) {
  if (!(e.major > 0.0) || !(e.minor > 0.0))
    throw Error(ErrorCode::InvalidArgument, "ellipse semi-axes must be positive");
  Eigen::Matrix2d R;
  R.col(0) = e.major_direction();
  R.col(1) = e.minor_direction();
  const Eigen::Matrix2d M =
      R * Eigen::Vector2d(1.0 / (e.major * e.major), 1.0 / (e.minor * e.minor)).asDiagonal() *
      R.transpose();
  Eigen::Matrix3d C;
  C.topLeftCorner<2, 2>() = M;
  C.topRightCorner<2, 1>() = -M * e.center;
  C.bottomLeftCorner<1, 2>() = (-M * e.center).transpose();
  C(2, 2) = e.center.dot(M * e.center) - 1.0;
  return Conicd(C);
}

Ellipse2d ellipse_from_conic(const Conicd& c) {
  const Eigen::Matrix3d& C = c.matrix();
  const Eigen::Matrix2d A = C.topLeftCorner<2, 2>();
  const Eigen::Vector2d b = C.topRightCorner<2, 1>();
  const double detA = A.determinant();
  if (!(detA > 0.0) || !(A.trace() > 0.0))
    throw Error(ErrorCode::NotAnEllipsoid, "conic is not an ellipse");
  Ellipse2d e;
  e.center = -A.inverse() * b;
  const double d = C(2, 2) + b.dot(e.center);
  if (!(d < 0.0)) throw Error(ErrorCode::NotAnEllipsoid, "conic has no real points");
  const Eigen::Matrix2d M = A / (-d);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(M);
  const Eigen::Vector2d lambda = es.eigenvalues();  // ascending: major axis first
  e.major = 1.0 / std::sqrt(lambda[0]);
  e.minor = 1.0 / std::sqrt(lambda[1]);
  const Eigen::Vector2d v = es.eigenvectors().col(0);
  double angle = std::atan2(v.y(), v.x());
  if (angle > M_PI / 2) angle -= M_PI;
  if (angle <= -M_PI / 2) angle += M_PI;
  e.angle = angle;
  return e;
}

std::vector<Eigen::Vector2d> sample_ellipse(const Ellipse2d& e, int count) {
  std::vector<Eigen::Vector2d> pts;
  pts.reserve(count);
  for (int i = 0; i < count; ++i) pts.push_back(e.point_at(2.0 * M_PI * i / count));
  return pts;
}

std::optional<Conicd> fit_ellipse(std::span<const Eigen::Vector2d> points) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (n < 5) return std::nullopt;

  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(n);
  double spread = 0.0;
  for (const auto& p : points) spread += (p - mean).norm();
  spread /= static_cast<double>(n);
  if (!(spread > 0.0)) return std::nullopt;
  const double s = spread / std::sqrt(2.0);

  Eigen::MatrixXd D1(n, 3), D2(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector2d q = (points[i] - mean) / s;
    D1.row(i) << q.x() * q.x(), q.x() * q.y(), q.y() * q.y();
    D2.row(i) << q.x(), q.y(), 1.0;
  }
  const Eigen::Matrix3d S1 = D1.transpose() * D1;
  const Eigen::Matrix3d S2 = D1.transpose() * D2;
  const Eigen::Matrix3d S3 = D2.transpose() * D2;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(S3);
  if (!lu.isInvertible()) return std::nullopt;
  const Eigen::Matrix3d T = -lu.solve(S2.transpose());
  const Eigen::Matrix3d M0 = S1 + S2 * T;
  Eigen::Matrix3d M;
  M.row(0) = M0.row(2) / 2.0;
  M.row(1) = -M0.row(1);
  M.row(2) = M0.row(0) / 2.0;

  Eigen::EigenSolver<Eigen::Matrix3d> es(M);
  int best = -1;
  double best_constraint = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d v = es.eigenvectors().col(k).real();
    const double constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
    if (constraint > best_constraint) {
      best_constraint = constraint;
      best = k;
    }
  }
  if (best < 0) return std::nullopt;
  const Eigen::Vector3d a1 = es.eigenvectors().col(best).real();
  const Eigen::Vector3d a2 = T * a1;

  Eigen::Matrix3d Cn;
  Cn << a1[0], a1[1] / 2, a2[0] / 2,
        a1[1] / 2, a1[2], a2[1] / 2,
        a2[0] / 2, a2[1] / 2, a2[2];
  // Pixel -> normalized coordinates.
  Eigen::Matrix3d N = Eigen::Matrix3d::Identity();
  N(0, 0) = N(1, 1) = 1.0 / s;
  N(0, 2) = -mean.x() / s;
  N(1, 2) = -mean.y() / s;
  Conicd c(N.transpose() * Cn * N);
  if (!c.is_ellipse()) return std::nullopt;
  return c;
}

double rms_sampson(const Conicd& c, std::span<const Eigen::Vector2d> points) {
  if (points.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& p : points) {
    const double d = c.sampson(p);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(points.size()));
}

}  // namespace bubblestream
