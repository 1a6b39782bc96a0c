#pragma once

#include <stdexcept>
#include <string>

namespace gradcell {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A tensor op produced NaN/Inf, or an input was non-finite. Message names the op.
struct NumericalError : Error {
    using Error::Error;
};

// API misuse: backward on a no-grad tape, empty metric input, shape rank abuse.
struct UsageError : Error {
    using Error::Error;
};

// Invalid configuration value (dropout >= 1, zero loss weights, unknown key, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input file; message carries file:line where possible.
struct ParseError : Error {
    using Error::Error;
};

// Structurally valid file with inconsistent dimensions or label sets.
struct SchemaError : Error {
    using Error::Error;
};

// A cell with no expressed gene reached normalization.
struct EmptyCellError : Error {
    using Error::Error;
};

// A lookup position lies outside the table it indexes into.
struct IndexError : Error {
    using Error::Error;
};

// Step-2 recomputation diverged from the Step-1 cache: RNG bookkeeping bug.
struct ReplayError : Error {
    using Error::Error;
};

// Memory budget below fixed overhead; no sequence length fits.
struct InfeasibleError : Error {
    using Error::Error;
};

// Degenerate statistics input (zero variance for a correlation).
struct DegenerateInputError : Error {
    using Error::Error;
};

}  // namespace gradcell
