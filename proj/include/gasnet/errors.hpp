#pragma once

#include <stdexcept>
#include <string>

namespace gasnet {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct TrainError : Error {
    using Error::Error;
};

}  // namespace gasnet
