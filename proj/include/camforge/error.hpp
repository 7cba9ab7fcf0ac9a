#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace camforge {

enum class ErrorCode {
  // tensor / manifest ingestion
  BadMagic,
  BadHeader,
  TruncatedPayload,
  TrailingData,
  NonFiniteValue,
  UnsupportedDtype,
  IoFailure,
  SchemaError,
  DuplicateClassName,
  LabelOutOfRange,
  MissingGroundTruth,
  // argument / shape contracts
  ShapeMismatch,
  InvalidArgument,
  ChannelOutOfRange,
  UsageError,
  // numerics
  DegenerateInput,
  ZeroNormVector,
  EmptyRegion,
  TooFewPoints,
  NoValidClass,
};

std::string_view to_string(ErrorCode code);

/// Process exit code for a failure of this kind: 2 usage/config, 3 data, 4 numeric.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace camforge
