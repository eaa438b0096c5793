// SPDX-License-Identifier: Apache-2.0
#ifndef AGRIFUSE_ERRORS_HPP
#define AGRIFUSE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace agrifuse {

/// Shape or dimension disagreement between operands.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid configuration value (bad hyperparameter, even kernel, p >= 1, ...).
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// Violated call contract (non-scalar backward, missing gradient, ...).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Malformed or inconsistent input data (CSV rows, series alignment, ...).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem and serialization failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace agrifuse

#endif  // AGRIFUSE_ERRORS_HPP
