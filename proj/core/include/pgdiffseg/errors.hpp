#pragma once

#include <stdexcept>
#include <string>

namespace pgdiffseg {

/// Caller passed a value outside an operation's domain.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A collaborator (usually a denoiser callback) broke its contract.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a loss component goes non-finite during training.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

/// Config file problems; carries the offending key and 1-based line (0 if unknown).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, int line, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)), line_(line) {}
  const std::string& key() const noexcept { return key_; }
  int line() const noexcept { return line_; }

 private:
  std::string key_;
  int line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pgdiffseg
