#include "camforge/error.hpp"

namespace camforge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::TrailingData: return "TrailingData";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::DuplicateClassName: return "DuplicateClassName";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ChannelOutOfRange: return "ChannelOutOfRange";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::ZeroNormVector: return "ZeroNormVector";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::NoValidClass: return "NoValidClass";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::UsageError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::ChannelOutOfRange:
      return 2;
    case ErrorCode::DegenerateInput:
    case ErrorCode::ZeroNormVector:
    case ErrorCode::EmptyRegion:
    case ErrorCode::TooFewPoints:
    case ErrorCode::NoValidClass:
      return 4;
    default:
      return 3;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace camforge
