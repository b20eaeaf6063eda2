/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <stdexcept>
#include <string>

namespace luminet {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor/image dimensions violate an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Bad command-line arguments or parameter combinations.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Unknown config keys, malformed config files, invalid values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Missing/corrupt datasets, manifests that do not resolve, empty inputs.
class DataError : public Error {
public:
    using Error::Error;
};

/// Checkpoint files that fail validation (magic, version, shapes).
class CheckpointError : public Error {
public:
    using Error::Error;
};

} // namespace luminet
