#pragma once

#include <stdexcept>
#include <string>

namespace precdiff {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or argument contract violated by a caller.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Configuration or input document failed validation. Carries the field path.
class ValidationError : public Error {
public:
    ValidationError(std::string path, const std::string& message)
        : Error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}

    [[nodiscard]] const std::string& path() const { return path_; }

private:
    std::string path_;
};

// Malformed file or wire message.
class FormatError : public Error {
public:
    using Error::Error;
};

// External model process misbehaved: bad reply, timeout or early exit.
class SessionError : public Error {
public:
    using Error::Error;
};

}  // namespace precdiff
