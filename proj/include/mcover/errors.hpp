#pragma once

#include <stdexcept>
#include <string>

namespace mcover {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
public:
    using Error::Error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Sinkhorn balancing did not reach the requested tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double final_deviation)
        : Error(what), final_deviation_(final_deviation) {}
    double final_deviation() const noexcept { return final_deviation_; }

private:
    double final_deviation_;
};

class UnsupportedSize : public Error {
public:
    using Error::Error;
};

/// Every complete matching of the kernel has zero weight.
class DegenerateKernel : public Error {
public:
    using Error::Error;
};

/// The averaged cover weights vanish, so no overlap can be defined.
class DegenerateCollapse : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class BadMagic : public ParseError {
public:
    using ParseError::ParseError;
};

class Truncated : public ParseError {
public:
    Truncated(const std::string& what, std::size_t offset, std::size_t expected, std::size_t actual)
        : ParseError(what + ": expected " + std::to_string(expected) + " bytes, got " +
                         std::to_string(actual),
                     offset),
          expected_(expected), actual_(actual) {}
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

class CountMismatch : public ParseError {
public:
    using ParseError::ParseError;
};

class SizeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mcover
