#pragma once

#include <stdexcept>
#include <string>

namespace dcco {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor / graph errors.
struct ShapeMismatch : Error {
  using Error::Error;
};
struct UnboundInput : Error {
  using Error::Error;
};
struct NonScalarLoss : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Model / statistics errors.
struct InvalidConfig : Error {
  using Error::Error;
};
struct IndivisibleWidth : Error {
  using Error::Error;
};
struct DimensionMismatch : Error {
  using Error::Error;
};
struct DegenerateVariance : Error {
  using Error::Error;
};
struct DimensionTooSmall : Error {
  using Error::Error;
};
struct BatchTooSmall : Error {
  using Error::Error;
};
struct EmptyList : Error {
  using Error::Error;
};

// Protocol errors.
struct KTooLarge : Error {
  using Error::Error;
};
struct EmptyRound : Error {
  using Error::Error;
};

// Data errors.
struct InsufficientSamples : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// Optimizer errors.
struct StepOutOfRange : Error {
  using Error::Error;
};

// Config errors (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace dcco
