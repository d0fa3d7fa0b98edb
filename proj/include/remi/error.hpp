#pragma once

#include <stdexcept>
#include <string>

namespace remi {

// Numeric values are part of the C ABI (see remi.h); do not reorder.
enum class ErrorCode : int {
  input = 1,
  dimension = 2,
  numeric = 3,
  state = 4,
  io = 5,
  format = 6,
  access = 7,
  training = 8,
  stall = 9,
  config = 10,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace remi
