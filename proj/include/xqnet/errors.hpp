#pragma once

#include <stdexcept>
#include <string>

namespace xqnet {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Layer hyperparameters that cannot work together (channels vs groups, rates).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Bad sample content: labels out of range, corrupt records.
class DataError : public Error {
public:
    using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, nondeterministic closure).
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed file layout.
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid model description; message carries the offending row.
class SpecError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    enum class Kind { BadMagic, BadVersion, Truncated, ShapeMismatch, Io };

    LoadError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// Training diverged (non-finite loss).
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch, int batch)
        : Error(what), epoch_(epoch), batch_(batch) {}
    int epoch() const noexcept { return epoch_; }
    int batch() const noexcept { return batch_; }

private:
    int epoch_;
    int batch_;
};

}  // namespace xqnet
