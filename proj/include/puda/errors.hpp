#pragma once

#include <stdexcept>
#include <string>

namespace puda {

/// Operand shapes do not conform.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Batch statistics requested over fewer than two rows.
class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation that needs at least one point received none.
class EmptyCloudError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Class label outside [0, C).
class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Integer argument outside its valid range (k > n, step > total, ...).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// API misuse that is not a data problem (non-scalar loss, detached node).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf encountered in a value or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Files referenced by a manifest are missing or inconsistent.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration key or value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace puda
