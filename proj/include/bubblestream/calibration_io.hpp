#pragma once

#include <filesystem>

#include <json.hpp>

#include "bubblestream/geometry.hpp"

namespace bubblestream {

/// Rig file contents: both cameras' intrinsics and the second camera's pose
/// (quaternion w,x,y,z plus translation in mm).
///
///   { "cam1": {"fx":..,"fy":..,"cx":..,"cy":..,"k1":..,"k2":..,"p1":..,"p2":..},
///     "cam2": {...},
///     "pose2": {"q": [w,x,y,z], "t": [x,y,z]},
///     "recalibrated": false }
struct CalibrationFile {
  StereoRigd rig;
  bool recalibrated = false;
};

nlohmann::json to_json(const Intrinsicsd& in);
Intrinsicsd intrinsics_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CalibrationFile& calib);
CalibrationFile calibration_from_json(const nlohmann::json& j);

CalibrationFile load_calibration(const std::filesystem::path& path);
void save_calibration(const std::filesystem::path& path, const CalibrationFile& calib);

/// Laboratory calibration of the reference instrument: two 1024x800 cameras
/// about 90 degrees apart, both looking into the rise corridor.
StereoRigd reference_rig();

}  // namespace bubblestream
