#include "bubblestream/error.hpp"

namespace bubblestream {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BehindCamera: return "behind-camera";
    case ErrorCode::DegenerateTriangulation: return "degenerate-triangulation";
    case ErrorCode::NotAnEllipsoid: return "not-an-ellipsoid";
    case ErrorCode::DegenerateProjection: return "degenerate-projection";
    case ErrorCode::Underconstrained: return "underconstrained";
    case ErrorCode::Unsynchronizable: return "unsynchronizable";
    case ErrorCode::DimensionMismatch: return "dimension-mismatch";
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::Io: return "io";
    case ErrorCode::Config: return "config";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
      code_(code) {}

}  // namespace bubblestream
