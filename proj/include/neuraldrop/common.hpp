#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nd {

/// Failure categories raised by the library. The CLI maps these onto exit codes.
enum class ErrorCode {
  InvalidArgument,
  InsufficientSamples,
  DegenerateLoop,
  DegenerateTangent,
  SelfIntersecting,
  UniformImage,
  OutOfBounds,
  AmbiguousTopology,
  WindowTooLong,
  InvalidParams,
  DimMismatch,
  MissingCache,
  ShapeMismatch,
  EmptyDataset,
  NonFiniteLoss,
  NoPositives,
  CorruptFile,
  VersionMismatch,
  ContourTooSmall,
  MarginViolation,
  NoConvergence,
  SingularSystem,
  DegenerateField,
  IoError,
  EmptyDatabase,
  DegenerateIncline,
  NonFinitePrediction,
  NoValidPair,
  DegenerateChild,
  NoOverlap,
  StitchFailure,
  InvalidConfig,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2() = default;
  constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator/(double s) const { return {x / s, y / s}; }
  constexpr Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr Vec2& operator-=(Vec2 o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  constexpr Vec2& operator*=(double s) {
    x *= s;
    y *= s;
    return *this;
  }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr Vec2 operator*(double s, Vec2 v) { return v * s; }
constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 v) { return std::hypot(v.x, v.y); }
inline double distance(Vec2 a, Vec2 b) { return norm(a - b); }

/// Formats a double with 17 significant digits (round-trip exact).
std::string format_double(double v);

}  // namespace nd
