#pragma once

#include <stdexcept>
#include <string>

namespace mechlearn {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kInvalidInput = 2,
  kNumericalFailure = 3,
  kPluginFailure = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept = 0;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kInvalidInput; }
};

// Input that is well-formed but carries no usable structure (constant image,
// all-zero differences, region smaller than a window).
class DegenerateInput : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class NumericalFailure : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumericalFailure; }
};

class PluginError : public Error {
 public:
  PluginError(const std::string& what, int step = -1)
      : Error(step >= 0 ? what + " (diffusion step " + std::to_string(step) + ")" : what),
        step_(step) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kPluginFailure; }
  int step() const noexcept { return step_; }

 private:
  int step_;
};

}  // namespace mechlearn
