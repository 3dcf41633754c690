#pragma once

#include <stdexcept>
#include <string>

namespace dbs {

// Base for every failure the library raises. Callers that only need a
// message can catch this; the subclasses let the CLI map failures to exit
// codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform. The message names the offending operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A NaN or Inf showed up in a forward value or loss.
class NumericError : public Error {
public:
    using Error::Error;
};

// Precondition violated by the caller (bad index, missing grad, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class EmptyInputError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

} // namespace dbs
