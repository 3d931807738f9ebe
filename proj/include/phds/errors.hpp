#pragma once

#include <stdexcept>
#include <string>

namespace phds {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement (matmul inner dims, elementwise mismatch, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Argument outside its mathematical domain (k > n, empty input, ...).
struct DomainError : Error {
    using Error::Error;
};

// Declared sparsity violates the k_train <= k_pre <= E contract.
struct SparsityError : Error {
    using Error::Error;
};

// Inconsistent or incomplete configuration; CLI maps this to exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Checkpoint file unreadable: bad magic, version, or truncated record.
struct FormatError : Error {
    using Error::Error;
};

// NaN/Inf surfaced where only finite values are legal.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace phds
