#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mgec {

// Invalid configuration or inconsistent shapes. CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input file. Message carries the file and line where parsing stopped.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss or similar failure inside the training loop.
class TrainingAbort : public std::runtime_error {
public:
    TrainingAbort(const std::string& what, std::size_t epoch, std::size_t batch)
        : std::runtime_error(what), epoch(epoch), batch(batch) {}
    std::size_t epoch = 0;
    std::size_t batch = 0;
};

} // namespace mgec
