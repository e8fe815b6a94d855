#pragma once

#include <stdexcept>
#include <string>

namespace attrobf {

/// Malformed text input (attribute lists, config files). Carries the line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Filesystem failures; the message names the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An object was used before it reached a usable state (e.g. an untrained adversary).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by the training loops when a loss term stops being finite.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& term, long iteration)
      : std::runtime_error("non-finite loss term '" + term + "' at iteration " + std::to_string(iteration)),
        term_(term),
        iteration_(iteration) {}
  const std::string& term() const { return term_; }
  long iteration() const { return iteration_; }

 private:
  std::string term_;
  long iteration_;
};

}  // namespace attrobf
