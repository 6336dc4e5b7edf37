#include "bubblestream/calibration_io.hpp"

#include <fstream>

namespace bubblestream {

using nlohmann::json;

json to_json(const Intrinsicsd& in) {
  return json{{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy},
              {"k1", in.k1}, {"k2", in.k2}, {"p1", in.p1}, {"p2", in.p2}};
}

Intrinsicsd intrinsics_from_json(const json& j) {
  try {
    Intrinsicsd in;
    in.fx = j.at("fx").get<double>();
    in.fy = j.at("fy").get<double>();
    in.cx = j.at("cx").get<double>();
    in.cy = j.at("cy").get<double>();
    in.k1 = j.value("k1", 0.0);
    in.k2 = j.value("k2", 0.0);
    in.p1 = j.value("p1", 0.0);
    in.p2 = j.value("p2", 0.0);
    in.validate();
    return in;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("intrinsics: ") + e.what());
  }
}

json to_json(const CalibrationFile& calib) {
  const Eigen::Vector4d q = calib.rig.pose2.quaternion_wxyz();
  const Eigen::Vector3d& t = calib.rig.pose2.translation;
  return json{{"cam1", to_json(calib.rig.cam1)},
              {"cam2", to_json(calib.rig.cam2)},
              {"pose2", {{"q", {q[0], q[1], q[2], q[3]}}, {"t", {t[0], t[1], t[2]}}}},
              {"recalibrated", calib.recalibrated}};
}

CalibrationFile calibration_from_json(const json& j) {
  CalibrationFile out;
  try {
    out.rig.cam1 = intrinsics_from_json(j.at("cam1"));
    out.rig.cam2 = intrinsics_from_json(j.at("cam2"));
    const auto q = j.at("pose2").at("q").get<std::vector<double>>();
    const auto t = j.at("pose2").at("t").get<std::vector<double>>();
    if (q.size() != 4 || t.size() != 3)
      throw Error(ErrorCode::Config, "pose2.q needs 4 and pose2.t needs 3 entries");
    out.rig.pose2 = Posed::from_quaternion(Eigen::Vector4d(q[0], q[1], q[2], q[3]),
                                           Eigen::Vector3d(t[0], t[1], t[2]));
    out.recalibrated = j.value("recalibrated", false);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("calibration: ") + e.what());
  }
  try {
    out.rig.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return out;
}

CalibrationFile load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open calibration file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, path.string() + ": " + e.what());
  }
  return calibration_from_json(j);
}

void save_calibration(const std::filesystem::path& path, const CalibrationFile& calib) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << to_json(calib).dump(2) << '\n';
}

StereoRigd reference_rig() {
  StereoRigd rig;
  rig.cam1 = {1723.189, 1737.865, 584.490, 362.619, -0.1087, 0.1184, -0.0031, -0.0021};
  rig.cam2 = {1711.854, 1719.751, 507.474, 349.812, -0.0716, 0.0106, -0.0136, -0.0128};
  rig.pose2 = Posed::from_quaternion(Eigen::Vector4d(0.694, -0.020, 0.718, 0.033),
                                     Eigen::Vector3d(-287.11, -17.11, 303.88));
  return rig;
}

}  // namespace bubblestream
