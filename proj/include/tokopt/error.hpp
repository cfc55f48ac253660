#pragma once

#include <stdexcept>
#include <string>

namespace tokopt {

enum class ErrorKind {
  kInvalidInput,
  kInvalidState,
  kConfiguration,
  kDegenerateClass,
  kDegenerateMask,
  kNumerical,
  kBackendUnavailable,
  kNotFound,
  kCancelled,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind() (the CLI
// maps kinds onto exit codes, the service onto HTTP statuses).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace tokopt
