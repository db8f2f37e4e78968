#pragma once

#include <stdexcept>
#include <string>

namespace icl {

/// Input with the wrong shape, length or layout.
class MalformedInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration value violates a module invariant.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss, gradient or update became non-finite.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A run manifest references an artifact that is missing or corrupt.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every SGLD chain diverged.
class EstimationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace icl
