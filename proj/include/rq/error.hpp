#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace rq {

// Base of every error thrown by the library. The CLI maps kinds to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BoundsError : public Error { public: using Error::Error; };
class NotOnGridError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class ShapeError : public Error { public: using Error::Error; };
class StateError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class SchemaError : public Error { public: using Error::Error; };
class TrainingError : public Error { public: using Error::Error; };

/// Parse failure with the byte offset (or line number) where it was detected.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
    explicit ParseError(const std::string& what) : Error(what), offset_(0) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Feature/model file problems; carries the 1-based line number when known.
class IoError : public Error {
public:
    IoError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    explicit IoError(const std::string& what) : Error(what), line_(0) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Encoder or metric subprocess failure; `diagnostics` holds captured output.
class BackendError : public Error {
public:
    BackendError(const std::string& what, std::string diagnostics = {})
        : Error(what), diagnostics_(std::move(diagnostics)) {}
    const std::string& diagnostics() const noexcept { return diagnostics_; }

private:
    std::string diagnostics_;
};

}  // namespace rq
