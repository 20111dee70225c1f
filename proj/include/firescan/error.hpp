#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace firescan {

// Every failure the library reports carries one of these codes so callers
// (the CLI in particular) can map failures onto exit classes.
enum class ErrorCode {
  io,
  bad_magic,
  bad_version,
  length_mismatch,
  non_finite,
  metadata,
  mask_value,
  truncated,
  duplicate_name,
  invalid_argument,
  shape_mismatch,
  config,
  state,
  syntax,
  data,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::bad_version: return "bad_version";
    case ErrorCode::length_mismatch: return "length_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::metadata: return "metadata";
    case ErrorCode::mask_value: return "mask_value";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::duplicate_name: return "duplicate_name";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::config: return "config";
    case ErrorCode::state: return "state";
    case ErrorCode::syntax: return "syntax";
    case ErrorCode::data: return "data";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Parse failure with the byte offset where it happened.
class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t offset, const std::string& what)
      : Error(ErrorCode::syntax, what + " at offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace firescan
