#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hype {

// Every error raised by the library derives from hype::Error so callers can
// catch the family and still dispatch on the concrete kind.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A point on or outside the ball boundary was passed where an interior point is required.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Möbius denominator collapsed below the configured floor.
class NumericInstability : public Error {
public:
    explicit NumericInstability(const std::string& what, std::size_t row = npos)
        : Error(what), row_(row) {}
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

/// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Missing entity / relation / node in a keyed table.
class KeyError : public Error {
public:
    explicit KeyError(const std::string& key)
        : Error("unknown key '" + key + "'"), key_(key) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class VocabularyError : public Error {
public:
    explicit VocabularyError(const std::string& token)
        : Error("token '" + token + "' is not in the vocabulary"), token_(token) {}
    const std::string& token() const noexcept { return token_; }

private:
    std::string token_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class OptimizationDiverged : public Error {
public:
    explicit OptimizationDiverged(std::size_t step)
        : Error("optimization diverged at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Auto residual scaling met a rank-1 update that does not move the key.
class DegenerateKey : public Error {
public:
    using Error::Error;
};

/// A per-case report does not match the listing schema.
class SchemaError : public Error {
public:
    SchemaError(long case_id, const std::string& what)
        : Error("case " + std::to_string(case_id) + ": " + what), case_id_(case_id) {}
    long case_id() const noexcept { return case_id_; }

private:
    long case_id_;
};

}  // namespace hype
