#pragma once

#include <stdexcept>
#include <string>

namespace llmboost {

// Error taxonomy shared by every module. All derive from std::runtime_error so
// callers that only care about "something went wrong" can catch one type.

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (missing fusion vector, bad arity).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Write-once violation in the state pool: a scheduler bug, never user input.
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DeadlockError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Descent precondition failed (alpha <= rho * Gamma).
struct BoundViolated : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace llmboost
