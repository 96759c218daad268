#pragma once

#include <stdexcept>
#include <string>

namespace dasm {

// Base type for every failure the library reports. Subclasses partition the
// failure modes so callers can catch what they can actually handle.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not line up for the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

// Math domain violation (log of a non-positive value, division by zero).
// Messages carry the offending flat index.
struct DomainError : Error {
  using Error::Error;
};

// Reduction over a tensor with no elements.
struct EmptyReductionError : Error {
  using Error::Error;
};

// API precondition broken (non-scalar backward root, mismatched weights, ...).
struct ContractError : Error {
  using Error::Error;
};

// Operation depends on state that was never established (restore without
// snapshot).
struct StateError : Error {
  using Error::Error;
};

// Domain index outside the configured range.
struct IndexError : Error {
  using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or undersized input data.
struct InputError : Error {
  using Error::Error;
};

// Too few samples to run an estimator.
struct SampleSizeError : Error {
  using Error::Error;
};

// Non-finite value where the algorithm requires finiteness; message carries a
// diagnostic dump.
struct NumericError : Error {
  using Error::Error;
};

// File read/write failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace dasm
