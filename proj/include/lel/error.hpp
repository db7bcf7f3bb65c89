#pragma once

#include <stdexcept>
#include <string>

namespace lel {

/// Violated precondition or interface contract (shapes, labels, branch ids).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values or a numeric routine that failed to converge.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parameter that cannot be used as given (zero-norm gain, bad budget).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed container, manifest or config file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, int epoch, int step)
        : std::runtime_error(what), epoch_(epoch), step_(step) {}
    int epoch() const noexcept { return epoch_; }
    int step() const noexcept { return step_; }

private:
    int epoch_;
    int step_;
};

} // namespace lel
