#pragma once

#include <stdexcept>
#include <string>

namespace coxvae {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or ranks do not fit the requested operation.
struct DimensionError : Error {
    using Error::Error;
};

/// An input value lies outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

/// An API precondition was violated (non-scalar backward, mixed graphs, ...).
struct ContractError : Error {
    using Error::Error;
};

/// A configuration value is invalid or two settings are inconsistent.
struct ConfigError : Error {
    using Error::Error;
};

/// The synthetic-data calibration could not reach its target.
struct CalibrationError : Error {
    using Error::Error;
};

/// Training failed numerically (NaN loss, NaN gradient).
struct TrainingError : Error {
    explicit TrainingError(const std::string& msg, std::size_t step = 0)
        : Error(msg), step(step) {}
    std::size_t step;
};

/// A file does not match its expected on-disk format.
struct FormatError : Error {
    using Error::Error;
};

/// Reading or writing a file failed.
struct IoError : Error {
    using Error::Error;
};

/// A metric is undefined on the given data (no comparable pairs, zero weight).
struct MetricError : Error {
    using Error::Error;
};

} // namespace coxvae
