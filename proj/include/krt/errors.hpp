#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace krt {

enum class ErrorKind { dimension, numeric, value, config, data, io, runtime };

std::string_view error_code(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};

// NaN or Inf produced or consumed by a differentiable op.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

// Argument outside its documented domain.
class ValueError : public Error {
public:
    explicit ValueError(const std::string& what) : Error(ErrorKind::value, what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

// Malformed, truncated or corrupt input data.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

}  // namespace krt
