#pragma once

#include <stdexcept>
#include <string>

namespace lg {

// Bad input data or configuration: maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure while running an otherwise valid job: maps to CLI exit code 2.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lg
