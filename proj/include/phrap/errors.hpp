#pragma once

#include <stdexcept>
#include <string>

namespace phrap {

// Everything thrown by the library derives from PhysicsError, except schema
// problems in scenario files (SchemaError) which the CLI reports separately.
struct PhysicsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidParameter : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct ConfinementError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct SingularityError : PhysicsError {
  SingularityError(std::size_t a, std::size_t b, double r)
      : PhysicsError("ions " + std::to_string(a) + " and " + std::to_string(b) +
                     " coincide (separation " + std::to_string(r) + " m)"),
        ion_a(a),
        ion_b(b) {}
  std::size_t ion_a, ion_b;
};

struct ConvergenceError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct UnstableError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct ConditioningError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct WaveformError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct CouplingNotClosedError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct DegenerateSweepError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct IntegratorError : PhysicsError {
  using PhysicsError::PhysicsError;
};

struct SchemaError : std::runtime_error {
  SchemaError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path(path) {}
  std::string path;
};

}  // namespace phrap
