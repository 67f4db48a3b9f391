#pragma once

#include <stdexcept>
#include <string>

namespace crane {

// Validation failures map to CLI exit code 1, I/O failures to exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crane
