#pragma once

#include <stdexcept>
#include <string>

namespace deepdeblur {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or size contract violation (mismatched operands, bad ranks).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or codec failure (PNG, kernel files, checkpoints).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content or configuration text.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Kernel synthesis failure (non-PSD covariance, zero-mass grid).
class SynthesisError : public Error {
 public:
  using Error::Error;
};

/// Image degradation failure (kernel larger than the image).
class DegradationError : public Error {
 public:
  using Error::Error;
};

/// Optimizer misuse or a training step that went non-finite.
class OptimizerError : public Error {
 public:
  using Error::Error;
};

/// Differentiation misuse (detached tensor, repeated backward, tape mixing).
class AutodiffError : public Error {
 public:
  using Error::Error;
};

/// A test oracle could not produce a verdict (non-finite evaluation).
class OracleError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepdeblur
