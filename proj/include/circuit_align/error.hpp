#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace circuit_align {

enum class ErrorCode {
  invalid_argument,
  domain_error,
  degenerate_input,
  load_error,
  cache_miss,
  task_unsolved,
  undefined_baseline,
  degenerate_influence,
  dimension_mismatch,
  unmatched_kind,
  generation_error,
  parse_error,
  resample_error,
  construction_error,
  io_error,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::domain_error: return "domain_error";
    case ErrorCode::degenerate_input: return "degenerate_input";
    case ErrorCode::load_error: return "load_error";
    case ErrorCode::cache_miss: return "cache_miss";
    case ErrorCode::task_unsolved: return "task_unsolved";
    case ErrorCode::undefined_baseline: return "undefined_baseline";
    case ErrorCode::degenerate_influence: return "degenerate_influence";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::unmatched_kind: return "unmatched_kind";
    case ErrorCode::generation_error: return "generation_error";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::resample_error: return "resample_error";
    case ErrorCode::construction_error: return "construction_error";
    case ErrorCode::io_error: return "io_error";
  }
  return "unknown";
}

/// Every failure surfaced by the toolkit carries one of the codes above so
/// the CLI can emit a structured error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace circuit_align
