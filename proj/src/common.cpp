#include "neuraldrop/common.hpp"

#include <cstdio>

namespace nd {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DegenerateLoop: return "DegenerateLoop";
    case ErrorCode::DegenerateTangent: return "DegenerateTangent";
    case ErrorCode::SelfIntersecting: return "SelfIntersecting";
    case ErrorCode::UniformImage: return "UniformImage";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::AmbiguousTopology: return "AmbiguousTopology";
    case ErrorCode::WindowTooLong: return "WindowTooLong";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::MissingCache: return "MissingCache";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ContourTooSmall: return "ContourTooSmall";
    case ErrorCode::MarginViolation: return "MarginViolation";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::DegenerateField: return "DegenerateField";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::EmptyDatabase: return "EmptyDatabase";
    case ErrorCode::DegenerateIncline: return "DegenerateIncline";
    case ErrorCode::NonFinitePrediction: return "NonFinitePrediction";
    case ErrorCode::NoValidPair: return "NoValidPair";
    case ErrorCode::DegenerateChild: return "DegenerateChild";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::StitchFailure: return "StitchFailure";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace nd
