#pragma once

#include <stdexcept>
#include <string>

namespace sst {

/// Base class for all errors thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

/// Cross-entropy target contained a value other than 0 or 1.
struct InvalidTarget : Error {
    using Error::Error;
};

/// backward() was called twice on the same graph, or on a tensor with no
/// recorded graph.
struct GraphConsumed : Error {
    using Error::Error;
};

struct NonScalarLoss : Error {
    using Error::Error;
};

/// A parameter had no gradient when the optimizer needed one.
struct MissingGrad : Error {
    using Error::Error;
};

struct InvalidSpec : Error {
    using Error::Error;
};

struct CorruptCheckpoint : Error {
    using Error::Error;
};

/// Checkpoint tensor names/shapes do not match the expected architecture.
struct ShapeConflict : Error {
    using Error::Error;
};

struct InvalidFold : Error {
    using Error::Error;
};

struct UnsupportedFormat : Error {
    using Error::Error;
};

struct MalformedHeader : Error {
    using Error::Error;
};

/// The inner-loop gradient map contained a NaN or Inf.
struct NonFiniteGradient : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace sst
