#pragma once

#include <stdexcept>
#include <string>

namespace nflr {

enum class ErrorKind {
    out_of_range,
    domain,
    config,
    validation,
    insufficient_data,
    unrecoverable_mask,
    empty_grid,
    undefined_statistic,
    convergence,
    integrity,
    io,
    precondition,  // refusal: caller must change inputs (exit code 2)
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace nflr
