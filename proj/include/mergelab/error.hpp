#pragma once

#include <stdexcept>
#include <string>

namespace mergelab {

// Broad failure classes. The CLI maps Usage -> 1, Data -> 2, Io -> 3.
enum class ErrorKind {
    Usage,
    Data,
    Io,
};

// Specific failure codes, grouped under a kind.
enum class ErrorCode {
    // tensor-store
    MalformedHeader,
    OverlappingRanges,
    OutOfBoundsRange,
    DuplicateTensor,
    MissingShard,
    UnsupportedDtype,
    UnknownTensor,
    CorruptData,
    TensorTooLarge,
    IoFailure,
    // merge-core
    ShapeMismatch,
    InvalidParameter,
    BaseRequired,
    ZeroNorm,
    SvdFailure,
    // analysis
    TensorSetMismatch,
    DegenerateInput,
    NoTransition,
    SchemaViolation,
    EmptyInput,
    // orchestration
    InvalidPlan,
    DigestMismatch,
};

const char* to_string(ErrorCode code);
ErrorKind kind_of(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    ErrorKind kind() const noexcept { return kind_of(code_); }

private:
    ErrorCode code_;
};

} // namespace mergelab
