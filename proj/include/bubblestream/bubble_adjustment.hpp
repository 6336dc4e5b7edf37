#pragma once

// Ellipsoid reconstruction from a matched pair of silhouettes: closed-form
// initialization, single-bubble refinement against the outline points, and
// joint refinement of many bubbles together with the rig's relative pose.
// All 2D inputs are ideal (undistorted) pixel coordinates.

#include <span>
#include <vector>

#include <Eigen/Core>

#include "bubblestream/conic.hpp"
#include "bubblestream/geometry.hpp"
#include "bubblestream/levenberg_marquardt.hpp"
#include "bubblestream/quadric.hpp"

namespace bubblestream {

/// Outline points of one bubble seen by both cameras.
struct SilhouettePair {
  std::vector<Eigen::Vector2d> view1;
  std::vector<Eigen::Vector2d> view2;
};

/// Centre from the triangulated ellipse centres; axis frame from the
/// back-projected major axes of both views; semi-axes from a linear fit of
/// the ellipsoid's cross-sections to both outlines. Throws
/// Error(DegenerateTriangulation) for parallel viewing rays.
Ellipsoidd init_ellipsoid(const StereoRigd& rig, const Ellipse2d& ell1, const Ellipse2d& ell2);

struct RefineResult {
  Ellipsoidd ellipsoid;
  LmSummary summary;
  double rms_px = 0.0;  // RMS Sampson distance over both views
  bool converged = false;
};

/// Minimizes the summed squared Sampson distances of both point sets to the
/// projected outlines over centre, rotation and log semi-axes. Requires at
/// least 8 points per view.
RefineResult refine_ellipsoid(const StereoRigd& rig, const Ellipsoidd& e0,
                              std::span<const Eigen::Vector2d> contour1,
                              std::span<const Eigen::Vector2d> contour2, const LmOptions& options = {});

/// Sampson residuals (px) of both point sets against the projected outlines,
/// view 1 first.
Eigen::VectorXd silhouette_residuals(const StereoRigd& rig, const Ellipsoidd& e,
                                     std::span<const Eigen::Vector2d> contour1,
                                     std::span<const Eigen::Vector2d> contour2);

struct SelfCalibrationOptions {
  LmOptions lm{100, 1e-10, 1e-12, 1.0};
  int min_bubbles = 10;
};

struct SelfCalibrationResult {
  StereoRigd rig;
  std::vector<Ellipsoidd> ellipsoids;  // one per used observation
  std::vector<std::size_t> used;       // indices into the observation list
  LmSummary summary;
};

/// Jointly refines every bubble and the rotation plus translation direction
/// of camera 2; the baseline length stays fixed. Observations whose outlines
/// cannot be fitted or initialized are skipped. Throws
/// Error(Underconstrained) with fewer than `min_bubbles` usable observations
/// or when all bubble centres are collinear.
SelfCalibrationResult self_calibrate(const StereoRigd& rig0, const std::vector<SilhouettePair>& observations,
                                     const SelfCalibrationOptions& options = {});

/// Applies a relative-pose update to camera 2: R ← exp(ω) R and
/// t ← ‖t‖ · normalize(t + B β), with B an orthonormal basis orthogonal to t.
StereoRigd apply_rig_update(const StereoRigd& rig, const Eigen::Vector3d& omega, const Eigen::Vector2d& beta);

}  // namespace bubblestream
