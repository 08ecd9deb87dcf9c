#pragma once

#include <stdexcept>
#include <string>

namespace fblab {

/// Error taxonomy mapped to process exit codes by the CLI:
///   ConfigError  -> exit 2 (unparseable input, unknown key, shape mismatch, bad usage)
///   NumericError -> exit 3 (NaN, solver failure, non-convergence, ill-conditioning)
/// Check failures in `theory-check` are reported, not thrown (exit 4 at the CLI).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fblab
