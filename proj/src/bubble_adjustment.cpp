#include "bubblestream/bubble_adjustment.hpp"

#include <algorithm>

#include <Eigen/QR>
#include <Eigen/SVD>
#include <unsupported/Eigen/AutoDiff>

namespace bubblestream {

namespace {

using Vector9d = Eigen::Matrix<double, 9, 1>;
template <typename T> using Vector9 = Eigen::Matrix<T, 9, 1>;
template <int N> using Jet = Eigen::AutoDiffScalar<Eigen::Matrix<double, N, 1>>;

constexpr int kBubbleDof = 9;
constexpr int kRigDof = 5;

/// Image frame centred on the projection of an anchor point and scaled to
/// roughly unit focal length. A similarity, so Sampson distances measured in
/// it convert back to pixels by a single factor.
struct ViewFrame {
  Eigen::Matrix3d TK;  // conditioning transform times intrinsics
  double scale = 1.0;  // pixels per conditioned unit
  std::vector<Eigen::Vector2d> points;
};

ViewFrame make_view_frame(const Camerad& cam, const Eigen::Vector3d& anchor,
                          std::span<const Eigen::Vector2d> points) {
  const Eigen::Matrix<double, 3, 4> P = cam.projection_matrix();
  const Eigen::Matrix3d M = P.leftCols<3>();
  const Eigen::Vector2d m = (P * anchor.homogeneous()).hnormalized();
  ViewFrame f;
  f.scale = M.topRows<2>().norm() / M.row(2).norm();
  Eigen::Matrix3d T = Eigen::Matrix3d::Identity();
  T(0, 0) = T(1, 1) = 1.0 / f.scale;
  T.topRightCorner<2, 1>() = -m / f.scale;
  f.TK = T * cam.intrinsics.K();
  f.points.reserve(points.size());
  for (const auto& x : points) f.points.push_back((x - m) / f.scale);
  return f;
}

/// Per-bubble constants: parameters are the centre offset from `anchor`,
/// a rotation vector relative to `base_rotation`, and log semi-axes.
struct BubbleFrame {
  Eigen::Vector3d anchor;
  Eigen::Matrix3d base_rotation;
  ViewFrame view1;
  ViewFrame view2;
};

BubbleFrame make_bubble_frame(const StereoRigd& rig, const Ellipsoidd& e0,
                              std::span<const Eigen::Vector2d> c1, std::span<const Eigen::Vector2d> c2) {
  return {e0.center, e0.orientation, make_view_frame(rig.camera1(), e0.center, c1),
          make_view_frame(rig.camera2(), e0.center, c2)};
}

Vector9d initial_parameters(const Ellipsoidd& e) {
  Vector9d p = Vector9d::Zero();
  p.tail<3>() = e.semi_axes.array().log();
  return p;
}

Ellipsoidd ellipsoid_from_parameters(const Vector9d& p, const BubbleFrame& f) {
  Ellipsoidd e;
  e.center = f.anchor + p.head<3>();
  e.orientation = rotation_from_axis_angle<double>(p.segment<3>(3)) * f.base_rotation;
  e.semi_axes = p.tail<3>().array().exp();
  return canonical(e);
}

/// Q* of the ellipsoid translated by -anchor: [DDᵀ − ccᵀ, −c; −cᵀ, −1].
template <typename T>
Matrix4<T> centred_dual_quadric(const Vector9<T>& p, const Eigen::Matrix3d& base_rotation) {
  using std::exp;
  const Matrix3<T> R = rotation_from_axis_angle<T>(p.template segment<3>(3)) * base_rotation.cast<T>();
  const Vector3<T> axes(exp(p[6]), exp(p[7]), exp(p[8]));
  const Matrix3<T> D = R * axes.asDiagonal();
  const Vector3<T> c = p.template head<3>();
  Matrix4<T> Q;
  Q.template topLeftCorner<3, 3>() = D * D.transpose() - c * c.transpose();
  Q.template topRightCorner<3, 1>() = -c;
  Q.template bottomLeftCorner<1, 3>() = -c.transpose();
  Q(3, 3) = T(-1);
  return Q;
}

template <typename T>
Matrix34<T> conditioned_projection(const ViewFrame& f, const Matrix3<T>& R, const Vector3<T>& t,
                                   const Eigen::Vector3d& anchor) {
  Matrix34<T> Rt;
  Rt.template leftCols<3>() = R;
  Rt.col(3) = R * anchor.cast<T>() + t;
  return f.TK.cast<T>() * Rt;
}

template <typename T>
void view_residuals(const Matrix34<T>& P, const Matrix4<T>& Qstar, const ViewFrame& f, T* out) {
  const Matrix3<T> C = adjugate<T>(project_dual_quadric<T>(P, Qstar));
  for (std::size_t i = 0; i < f.points.size(); ++i)
    out[i] = T(f.scale) * sampson_distance<T>(C, f.points[i].cast<T>());
}

/// Camera-2 pose after an update (ω, β) applied to the reference pose.
template <typename T>
void updated_pose(const Posed& reference, const Eigen::Matrix<double, 3, 2>& basis, const Vector3<T>& omega,
                  const Vector2<T>& beta, Matrix3<T>& R, Vector3<T>& t) {
  using std::sqrt;
  R = rotation_from_axis_angle<T>(omega) * reference.rotation.cast<T>();
  const Vector3<T> dir = reference.translation.cast<T>() + basis.cast<T>() * beta;
  t = dir * (T(reference.translation.norm()) / sqrt(dir.squaredNorm()));
}

Eigen::Matrix<double, 3, 2> translation_basis(const Eigen::Vector3d& t) {
  Eigen::Matrix<double, 3, 2> B;
  B.col(0) = t.unitOrthogonal();
  B.col(1) = t.normalized().cross(B.col(0));
  return B;
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> bubble_residuals(const Vector9<T>& p, const BubbleFrame& f,
                                                     const Matrix3<T>& R2, const Vector3<T>& t2) {
  const Matrix4<T> Qstar = centred_dual_quadric<T>(p, f.base_rotation);
  const auto n1 = static_cast<Eigen::Index>(f.view1.points.size());
  const auto n2 = static_cast<Eigen::Index>(f.view2.points.size());
  Eigen::Matrix<T, Eigen::Dynamic, 1> r(n1 + n2);
  const Matrix34<T> P1 = conditioned_projection<T>(f.view1, Matrix3<T>::Identity(), Vector3<T>::Zero(), f.anchor);
  const Matrix34<T> P2 = conditioned_projection<T>(f.view2, R2, t2, f.anchor);
  view_residuals<T>(P1, Qstar, f.view1, r.data());
  view_residuals<T>(P2, Qstar, f.view2, r.data() + n1);
  return r;
}

double rms(const Eigen::VectorXd& r) {
  return r.size() ? std::sqrt(r.squaredNorm() / static_cast<double>(r.size())) : 0.0;
}

}  // namespace

Ellipsoidd init_ellipsoid(const StereoRigd& rig, const Ellipse2d& ell1, const Ellipse2d& ell2) {
  const StereoRigd ideal = rig.pinhole();
  const Camerad cam1 = ideal.camera1();
  const Camerad cam2 = ideal.camera2();
  const Triangulation tri =
      triangulate_midpoint(back_project(cam1, ell1.center), back_project(cam2, ell2.center));
  const Eigen::Vector3d X = tri.point;
  for (const Camerad* cam : {&cam1, &cam2})
    if (!(cam->pose.transform(X).z() > 0.0))
      throw Error(ErrorCode::DegenerateTriangulation, "triangulated centre is behind a camera");

  // Half-axis of an outline back-projected to the bubble's distance.
  auto half_axis = [&](const Camerad& cam, const Ellipse2d& e, const Eigen::Vector2d& dir, double len) {
    const double d = (X - cam.center()).norm();
    const Eigen::Vector3d a = back_project(cam, e.center + len * dir).point_at(d);
    const Eigen::Vector3d b = back_project(cam, e.center - len * dir).point_at(d);
    return Eigen::Vector3d(0.5 * (a - b));
  };
  const Eigen::Vector3d p1 = half_axis(cam1, ell1, ell1.major_direction(), ell1.major);
  const Eigen::Vector3d q1 = half_axis(cam1, ell1, ell1.minor_direction(), ell1.minor);
  const Eigen::Vector3d p2 = half_axis(cam2, ell2, ell2.major_direction(), ell2.major);
  const Eigen::Vector3d q2 = half_axis(cam2, ell2, ell2.minor_direction(), ell2.minor);

  // Axis frame: major axis of view 1, the view-2 axis least parallel to it,
  // and their cross product, snapped to the nearest rotation.
  const Eigen::Vector3d u0 = p1.normalized();
  const Eigen::Vector3d second =
      std::abs(u0.dot(p2.normalized())) <= std::abs(u0.dot(q2.normalized())) ? p2.normalized()
                                                                              : q2.normalized();
  Eigen::Matrix3d M;
  M.col(0) = u0;
  M.col(1) = second;
  M.col(2) = u0.cross(second).normalized();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU();
  if ((U * svd.matrixV().transpose()).determinant() < 0.0) U.col(2) = -U.col(2);
  const Eigen::Matrix3d R = U * svd.matrixV().transpose();

  // Squared semi-axes s from Πᵀ R diag(s) Rᵀ Π = Πᵀ (ppᵀ + qqᵀ) Π for each view,
  // where Π spans the outline's back-projected plane.
  Eigen::Matrix<double, 6, 3> A;
  Eigen::Matrix<double, 6, 1> y;
  int row = 0;
  for (const auto& [p, q] : {std::pair{p1, q1}, std::pair{p2, q2}}) {
    Eigen::Matrix<double, 3, 2> Pi;
    Pi.col(0) = p.normalized();
    Pi.col(1) = (q - q.dot(Pi.col(0)) * Pi.col(0)).normalized();
    const Eigen::Matrix2d observed = Pi.transpose() * (p * p.transpose() + q * q.transpose()) * Pi;
    for (int i = 0; i < 3; ++i) {
      const Eigen::Vector2d r = Pi.transpose() * R.col(i);
      A(row, i) = r[0] * r[0];
      A(row + 1, i) = std::sqrt(2.0) * r[0] * r[1];
      A(row + 2, i) = r[1] * r[1];
    }
    y[row] = observed(0, 0);
    y[row + 1] = std::sqrt(2.0) * observed(0, 1);
    y[row + 2] = observed(1, 1);
    row += 3;
  }
  Eigen::Vector3d s = A.colPivHouseholderQr().solve(y);
  const double smallest = std::min(q1.norm(), q2.norm());
  const double floor = 0.25 * smallest * smallest;
  Ellipsoidd e;
  e.center = X;
  e.orientation = R;
  for (int i = 0; i < 3; ++i) e.semi_axes[i] = std::sqrt(std::max(s[i], floor));
  return canonical(e);
}

Eigen::VectorXd silhouette_residuals(const StereoRigd& rig, const Ellipsoidd& e,
                                     std::span<const Eigen::Vector2d> contour1,
                                     std::span<const Eigen::Vector2d> contour2) {
  const BubbleFrame f = make_bubble_frame(rig, e, contour1, contour2);
  return bubble_residuals<double>(initial_parameters(e), f, rig.pose2.rotation, rig.pose2.translation);
}

RefineResult refine_ellipsoid(const StereoRigd& rig, const Ellipsoidd& e0,
                              std::span<const Eigen::Vector2d> contour1,
                              std::span<const Eigen::Vector2d> contour2, const LmOptions& options) {
  if (contour1.size() < 8 || contour2.size() < 8)
    throw Error(ErrorCode::InvalidArgument, "need at least 8 contour points per view");
  e0.validate();
  const BubbleFrame f = make_bubble_frame(rig, e0, contour1, contour2);
  using J = Jet<kBubbleDof>;
  const Matrix3<J> R2 = rig.pose2.rotation.cast<J>();
  const Vector3<J> t2 = rig.pose2.translation.cast<J>();

  auto evaluate = [&](std::size_t, const Vector9d& p, const Eigen::VectorXd&, bool with_jacobian) {
    ArrowBlock<kBubbleDof> block;
    if (!with_jacobian) {
      block.residuals = bubble_residuals<double>(p, f, rig.pose2.rotation, rig.pose2.translation);
      return block;
    }
    Vector9<J> pj;
    for (int i = 0; i < kBubbleDof; ++i) pj[i] = J(p[i], kBubbleDof, i);
    const Eigen::Matrix<J, Eigen::Dynamic, 1> r = bubble_residuals<J>(pj, f, R2, t2);
    block.residuals.resize(r.size());
    block.local_jacobian.resize(r.size(), kBubbleDof);
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      block.residuals[i] = r[i].value();
      block.local_jacobian.row(i) = r[i].derivatives().transpose();
    }
    return block;
  };

  std::vector<Vector9d> x{initial_parameters(e0)};
  Eigen::VectorXd none(0);
  RefineResult out;
  out.summary = minimize_arrow<kBubbleDof>(x, none, evaluate, options);
  out.converged = out.summary.converged;
  const Eigen::Vector3d axes = x[0].tail<3>().array().exp();
  if (!x[0].allFinite() || !axes.allFinite() || !(axes.minCoeff() > 0.0)) {
    // Collapsed to a degenerate shape; keep the start and report it.
    x[0] = initial_parameters(e0);
    out.converged = false;
  }
  out.ellipsoid = ellipsoid_from_parameters(x[0], f);
  out.rms_px = rms(bubble_residuals<double>(x[0], f, rig.pose2.rotation, rig.pose2.translation));
  return out;
}

StereoRigd apply_rig_update(const StereoRigd& rig, const Eigen::Vector3d& omega, const Eigen::Vector2d& beta) {
  StereoRigd out = rig;
  updated_pose<double>(rig.pose2, translation_basis(rig.pose2.translation), omega, beta, out.pose2.rotation,
                       out.pose2.translation);
  return out;
}

SelfCalibrationResult self_calibrate(const StereoRigd& rig0, const std::vector<SilhouettePair>& observations,
                                     const SelfCalibrationOptions& options) {
  rig0.validate();
  SelfCalibrationResult out;
  std::vector<BubbleFrame> frames;
  std::vector<Vector9d> x;
  for (std::size_t k = 0; k < observations.size(); ++k) {
    const SilhouettePair& obs = observations[k];
    if (obs.view1.size() < 8 || obs.view2.size() < 8) continue;
    const auto c1 = fit_ellipse(obs.view1);
    const auto c2 = fit_ellipse(obs.view2);
    if (!c1 || !c2) continue;
    try {
      const Ellipsoidd e0 = init_ellipsoid(rig0, ellipse_from_conic(*c1), ellipse_from_conic(*c2));
      if (!e0.center.allFinite() || !(e0.semi_axes.minCoeff() > 0.0)) continue;
      frames.push_back(make_bubble_frame(rig0, e0, obs.view1, obs.view2));
      x.push_back(initial_parameters(e0));
      out.used.push_back(k);
    } catch (const Error&) {
      continue;
    }
  }
  if (static_cast<int>(frames.size()) < std::max(options.min_bubbles, 2))
    throw Error(ErrorCode::Underconstrained,
                std::to_string(frames.size()) + " usable bubbles, need " + std::to_string(options.min_bubbles));

  Eigen::MatrixXd centres(3, static_cast<Eigen::Index>(frames.size()));
  for (std::size_t k = 0; k < frames.size(); ++k) centres.col(static_cast<Eigen::Index>(k)) = frames[k].anchor;
  const Eigen::MatrixXd spread = centres.colwise() - centres.rowwise().mean();
  const Eigen::Vector3d sv = Eigen::JacobiSVD<Eigen::MatrixXd>(spread).singularValues();
  if (!(sv[1] > 1e-3 * sv[0]) || !(sv[0] > 1e-9))
    throw Error(ErrorCode::Underconstrained, "bubble centres are collinear");

  const Eigen::Matrix<double, 3, 2> basis = translation_basis(rig0.pose2.translation);
  using J = Jet<kBubbleDof + kRigDof>;
  auto evaluate = [&](std::size_t k, const Vector9d& p, const Eigen::VectorXd& y, bool with_jacobian) {
    ArrowBlock<kBubbleDof> block;
    if (!with_jacobian) {
      Eigen::Matrix3d R2;
      Eigen::Vector3d t2;
      updated_pose<double>(rig0.pose2, basis, y.head<3>(), y.tail<2>(), R2, t2);
      block.residuals = bubble_residuals<double>(p, frames[k], R2, t2);
      return block;
    }
    constexpr int n = kBubbleDof + kRigDof;
    Vector9<J> pj;
    for (int i = 0; i < kBubbleDof; ++i) pj[i] = J(p[i], n, i);
    Vector3<J> omega;
    Vector2<J> beta;
    for (int i = 0; i < 3; ++i) omega[i] = J(y[i], n, kBubbleDof + i);
    for (int i = 0; i < 2; ++i) beta[i] = J(y[3 + i], n, kBubbleDof + 3 + i);
    Matrix3<J> R2;
    Vector3<J> t2;
    updated_pose<J>(rig0.pose2, basis, omega, beta, R2, t2);
    const Eigen::Matrix<J, Eigen::Dynamic, 1> r = bubble_residuals<J>(pj, frames[k], R2, t2);
    block.residuals.resize(r.size());
    block.local_jacobian.resize(r.size(), kBubbleDof);
    block.shared_jacobian.resize(r.size(), kRigDof);
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      block.residuals[i] = r[i].value();
      const auto& d = r[i].derivatives();
      block.local_jacobian.row(i) = d.template head<kBubbleDof>().transpose();
      block.shared_jacobian.row(i) = d.template tail<kRigDof>().transpose();
    }
    return block;
  };

  Eigen::VectorXd y = Eigen::VectorXd::Zero(kRigDof);
  out.summary = minimize_arrow<kBubbleDof>(x, y, evaluate, options.lm);
  out.rig = apply_rig_update(rig0, y.head<3>(), y.tail<2>());
  for (std::size_t k = 0; k < frames.size(); ++k) out.ellipsoids.push_back(ellipsoid_from_parameters(x[k], frames[k]));
  return out;
}

}  // namespace bubblestream
