#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace p2mx {

enum class ErrorCode {
  kShape,
  kDomain,
  kIo,
  kFormat,
  kConfig,
  kNumeric,
  kUsage,
};

std::string_view error_code_name(ErrorCode code);

// All library failures are reported as p2mx::Error. The CLI prints
// "<CODE>: <message>" on one line and exits nonzero.
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

}  // namespace p2mx
