#pragma once

#include <stdexcept>
#include <string>

namespace memo {

/// Shapes of operands do not conform.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A class index or element index is out of range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// An argument violates a documented precondition.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An API contract was broken by the caller (e.g. differentiating a non-scalar).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed file contents (bad magic, unsupported version).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Two sources of data disagree with each other.
struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN or Inf reached a place where it would otherwise propagate silently.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A quantity is mathematically undefined for the given input.
struct UndefinedValueError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Retained graph would not fit in memory.
struct MemoryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Adversarial search failed for a reason other than "nothing found".
struct SearchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A requested training snapshot is not present in a trace.
struct GapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace memo
