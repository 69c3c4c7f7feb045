#pragma once

#include <stdexcept>
#include <string>

namespace handkd {

inline constexpr const char* kToolVersion = "1.0.0";

/// File-format problems: bad magic, version mismatch, truncated or
/// malformed sections. CLI maps these to exit code 2.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite losses or gradients during optimization. CLI maps these to
/// exit code 3.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace handkd
