// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_ERRORS_HPP
#define FEDRAND_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fedrand {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument values (nonpositive stddev, empty batch, out-of-range K, ...).
struct ArgumentError : Error {
  using Error::Error;
};

// Incompatible matrix/adapter shapes.
struct DimensionError : Error {
  using Error::Error;
};

// Malformed input data (token id out of vocabulary, bad record, ...).
struct DataError : Error {
  using Error::Error;
};

// Invalid experiment or federation configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Violation of a protocol contract (duplicate contributions, missing family, ...).
struct ProtocolError : Error {
  using Error::Error;
};

// Dirichlet partitioning could not satisfy the nonempty-client requirement.
struct PartitionError : Error {
  using Error::Error;
};

// Filesystem / serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace fedrand

#endif  // FEDRAND_ERRORS_HPP
