#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffsr {

enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  UnitsMismatch,
  OutOfRange,
  NonFinite,
  Divergence,
  EmptyMask,
  UncoveredPixel,
  MissingInput,
  MalformedHeader,
  TruncatedPayload,
  DtypeMismatch,
  Io,
  Config,
};

std::string_view to_string(ErrorKind kind);

/// Every failure the library reports carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace diffsr
