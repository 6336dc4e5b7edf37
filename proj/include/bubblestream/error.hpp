#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bubblestream {

enum class ErrorCode {
  BehindCamera,
  DegenerateTriangulation,
  NotAnEllipsoid,
  DegenerateProjection,
  Underconstrained,
  Unsynchronizable,
  DimensionMismatch,
  InvalidArgument,
  Io,
  Config,
};

/// Stable kebab-case name used in messages and logs ("behind-camera", ...).
std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bubblestream
