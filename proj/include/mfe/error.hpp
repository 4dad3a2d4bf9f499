#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mfe {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed expression text. offset is a byte offset into the input.
class ParseError : public Error {
public:
    ParseError(std::size_t offset, const std::string& what)
        : Error("parse error at offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Bad or inconsistent user configuration; key names the offending entry.
class ConfigError : public Error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : Error(key + ": " + what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

class SolverError : public Error {
public:
    SolverError(double t, const std::string& what)
        : Error(what + " at t=" + std::to_string(t)), time_(t) {}
    double time() const { return time_; }

private:
    double time_;
};

// Raised when a computed quantity violates a structural guarantee of the
// expansion (e.g. a denominator that label selection should have excluded).
class ConsistencyError : public Error {
public:
    using Error::Error;
};

class BudgetError : public Error {
public:
    BudgetError(const std::string& what, std::size_t count)
        : Error(what + " (count " + std::to_string(count) + ")"), count_(count) {}
    std::size_t count() const { return count_; }

private:
    std::size_t count_;
};

}  // namespace mfe
