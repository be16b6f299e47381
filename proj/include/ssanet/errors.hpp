#pragma once

#include <stdexcept>
#include <string>

namespace ssanet {

// Error taxonomy shared by all modules. The CLI maps ConfigError to exit
// code 2 and NumericError to exit code 3; everything else is a bug in the
// caller and surfaces as a nonzero generic failure.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user-facing configuration (invalid S, non-integer stride, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Shape mismatch between tensors / filters / grids.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range index (labels, node ids).
struct IndexError : Error {
    using Error::Error;
};

// Violated call contract (non-scalar backward root, stale provenance, ...).
struct ContractError : Error {
    using Error::Error;
};

// An operation produced NaN/Inf from finite inputs.
struct NumericError : Error {
    using Error::Error;
};

// Not enough proposals survived to satisfy a top-K request.
struct SelectionError : Error {
    using Error::Error;
};

}  // namespace ssanet
