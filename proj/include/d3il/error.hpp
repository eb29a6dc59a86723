#pragma once

#include <stdexcept>
#include <string>

namespace d3il {

// Process exit codes used by the CLI. Each error class below maps to one.
enum class ExitCode : int {
    kOk = 0,
    kUnknown = 1,
    kConfig = 2,
    kContract = 3,
    kIo = 4,
    kNumerical = 5,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::kUnknown; }
};

/// Invalid user configuration (bad spec, unknown toggle, out-of-range hyperparameter).
class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

/// A caller violated an operation's precondition (shape mismatch, empty batch, wrong label).
class ContractError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::kContract; }
};

class IoError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::kIo; }
};

/// NaN/Inf detected during training. `component` names the offending term.
class NumericalFault : public Error {
public:
    NumericalFault(const std::string& component, const std::string& what)
        : Error(what), component_(component) {}
    ExitCode exit_code() const noexcept override { return ExitCode::kNumerical; }
    const std::string& component() const noexcept { return component_; }

private:
    std::string component_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace d3il
