#pragma once

#include <stdexcept>
#include <string>

namespace vitstem {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible with an operation.
struct ShapeError : Error {
    using Error::Error;
};

// A configuration violates one of its invariants.
struct ConfigError : Error {
    using Error::Error;
};

// Runtime input rejected by an operation's precondition.
struct InputError : Error {
    using Error::Error;
};

// Unknown canonical name or key.
struct NameLookupError : Error {
    using Error::Error;
};

// A record set cannot be aggregated (e.g. missing asymptotic run).
struct AggregationError : Error {
    using Error::Error;
};

// Degenerate statistical input (e.g. zero variance for a correlation).
struct StatsError : Error {
    using Error::Error;
};

}  // namespace vitstem
