#pragma once

#include <stdexcept>
#include <string>

namespace revkd {

/// Invalid user-supplied configuration (maps to CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss or gradient (maps to CLI exit code 1).
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace revkd
