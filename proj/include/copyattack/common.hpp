#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace copyattack {

/// Dense index of a user within one domain.
using UserId = std::int32_t;
/// Dense index of an item. Source-domain profiles are expressed in target item ids
/// once restricted to the overlap set.
using ItemId = std::int32_t;

using Profile = std::vector<ItemId>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;

// Error hierarchy. The CLI maps these onto exit codes.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or insufficient input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Parse failure with the offending 1-based line number.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Corrupt or mismatched checkpoint.
class IntegrityError : public DataError {
 public:
  using DataError::DataError;
};

/// Invalid configuration or arguments (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Divergence, non-finite values (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace copyattack
