#pragma once

#include <stdexcept>
#include <string>

namespace dumo {

// Shapes or conditioning inputs do not line up.
struct StructuralError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A value lies outside the domain an operation is defined on (e.g. t outside [0,1]).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Invalid or contradictory configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input files that are unreadable or inconsistent.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A loss or gradient became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step = -1)
      : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace dumo
