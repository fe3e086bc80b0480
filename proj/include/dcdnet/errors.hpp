#pragma once

#include <stdexcept>
#include <string>

namespace dcdnet {

// Tensor shapes disagree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A class id was requested that the domain does not own.
class InvalidClassError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A protocol rule was broken, e.g. a query mask was read while fine-tuning.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A loss or activation went non-finite. `component` names the culprit.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

// A required file (checkpoint, export directory) is missing or unreadable.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, const std::string& what)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

}  // namespace dcdnet
