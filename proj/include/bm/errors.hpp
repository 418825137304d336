#pragma once

#include <stdexcept>

namespace bm {

/// Argument outside the domain of a special function or distribution.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Vector or matrix sizes that do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration or command-line usage.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File could not be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bm
