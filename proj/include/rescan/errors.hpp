#pragma once

#include <stdexcept>
#include <string>

namespace rescan {

// Inconsistent shapes, bad hyperparameters, violated scene constraints.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// File system and codec failures. The message always names the path.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// NaN / Inf encountered in a loss or gradient.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace rescan
