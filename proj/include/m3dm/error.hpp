#pragma once

#include <stdexcept>
#include <string>

namespace m3dm {

enum class ErrorKind {
  BadArity,
  BadParam,
  DegenerateScene,
  EmptyData,
  NonFinite,
  IoError,
  FormatError,
  SizeMismatch,
  OneClassOnly,
  NoAnomaly,
  ConfigError,
  DataError,
};

const char* to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries one of the kinds above so the
/// CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) throw Error(kind, what);
}

}  // namespace m3dm
