// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace monolex {

// Bad arguments, invariant violations, malformed configuration. CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Configuration that parses but is inconsistent (e.g. judge == rephraser).
class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Filesystem and file-format failures. CLI exit code 2.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public IoError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Any failure reaching or parsing a model endpoint. CLI exit code 2.
class ClientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace monolex
