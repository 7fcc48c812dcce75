#pragma once

#include <stdexcept>
#include <string>

namespace flexchill {

// Numeric preconditions violated at runtime (non-finite inputs, undefined
// similarity, degenerate statistics).
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed external files (IDX, CSV, checkpoints). Message names the file.
struct format_error : std::runtime_error {
    explicit format_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace flexchill
