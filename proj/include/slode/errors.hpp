#pragma once

#include <stdexcept>
#include <string>

namespace slode {

/// Shapes of operands do not agree with what an operation needs.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A value lies outside the mathematical domain of an operation (log of 0, tau outside (0,1), ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A scalar argument (window size, sample count, ...) is out of range.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Misuse of an API contract, e.g. calling backward on a non-scalar.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Malformed text or binary input. Line is 0 when it does not apply.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

} // namespace slode
