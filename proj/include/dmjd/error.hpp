#pragma once

#include <stdexcept>
#include <string>

namespace dmjd {

// Base for everything the library throws.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents do not line up.
struct shape_error : error {
    using error::error;
};

// Index outside a valid range (gather/scatter, labels).
struct index_error : error {
    using error::error;
};

// Bad user-supplied parameter or configuration value.
struct config_error : error {
    using error::error;
};

// An operation's usage contract was violated (wrong state, wrong argument class).
struct contract_error : error {
    using error::error;
};

// Tape/backward lifecycle misuse.
struct lifecycle_error : error {
    using error::error;
};

// NaN or Inf surfaced from a numeric kernel.
struct numeric_error : error {
    using error::error;
};

// On-disk format violation.
struct format_error : error {
    using error::error;
};

// A masking plan that cannot satisfy its bounds.
struct infeasible_error : config_error {
    using config_error::config_error;
};

}  // namespace dmjd
