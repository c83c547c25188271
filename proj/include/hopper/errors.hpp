#pragma once

#include <stdexcept>
#include <string>

namespace hopper {

// Bad parameters, malformed config or input files. The CLI maps this to
// exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// J M^-1 J^T is numerically singular: the domain's constraint set is
// inconsistent with the mass matrix (should not happen for valid params).
struct SingularConstraint : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Two distinct guards fired inside the same event tolerance window. The
// model assumes contact switching events are isolated, so we reject rather
// than ordering them arbitrarily.
struct AmbiguousEvent : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Adaptive integrator hit the minimum step size without meeting the error
// tolerance.
struct StepFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// State norm exceeded the divergence bound, or no next apex exists. A
// signal of orbital instability rather than a bug.
struct SimulationDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Requested phase sequence is not a path in the model's directed cycle.
struct InfeasibleStructure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Seed state handed to the eigenvalue analysis is not a fixed point of the
// return map to the required tolerance.
struct FixedPointResidualTooLarge : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Energy reports for the two variants do not share the same H_f grid.
struct MismatchedGrids : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Least-squares fit could not reduce the residual below the initial guess:
// bad data or wrong model variant.
struct NoImprovement : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace hopper
