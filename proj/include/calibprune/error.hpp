// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace calibprune {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kOutOfRange,
  kMalformedHeader,
  kTruncatedPayload,
  kNonFinite,
  kIo,
  kParse,
  kMissingField,
  kDiverged,
};

inline std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kOutOfRange: return "out of range";
    case ErrorCode::kMalformedHeader: return "malformed header";
    case ErrorCode::kTruncatedPayload: return "truncated payload";
    case ErrorCode::kNonFinite: return "non-finite values";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kParse: return "parse error";
    case ErrorCode::kMissingField: return "missing field";
    case ErrorCode::kDiverged: return "diverged";
  }
  return "unknown";
}

// Single exception type for the library; the code lets callers (and tests)
// distinguish failure classes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void Require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) Fail(code, what);
}

}  // namespace calibprune
