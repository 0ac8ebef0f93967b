#pragma once

#include <stdexcept>
#include <string>

namespace ibattr {

// An operation's input contract was violated (shape mismatch, bad range, ...).
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A file could not be opened, read or written; message names the file.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// On-disk data is present but malformed or inconsistent with its manifest.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A run configuration is unusable (e.g. single-class training set).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Synthetic geometry could not reach the requested lesion fraction.
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ibattr
