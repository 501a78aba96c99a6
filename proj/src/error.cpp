#include "mergelab/error.hpp"

namespace mergelab {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedHeader: return "MalformedHeader";
        case ErrorCode::OverlappingRanges: return "OverlappingRanges";
        case ErrorCode::OutOfBoundsRange: return "OutOfBoundsRange";
        case ErrorCode::DuplicateTensor: return "DuplicateTensor";
        case ErrorCode::MissingShard: return "MissingShard";
        case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorCode::UnknownTensor: return "UnknownTensor";
        case ErrorCode::CorruptData: return "CorruptData";
        case ErrorCode::TensorTooLarge: return "TensorTooLarge";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::InvalidParameter: return "InvalidParameter";
        case ErrorCode::BaseRequired: return "BaseRequired";
        case ErrorCode::ZeroNorm: return "ZeroNorm";
        case ErrorCode::SvdFailure: return "SvdFailure";
        case ErrorCode::TensorSetMismatch: return "TensorSetMismatch";
        case ErrorCode::DegenerateInput: return "DegenerateInput";
        case ErrorCode::NoTransition: return "NoTransition";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::InvalidPlan: return "InvalidPlan";
        case ErrorCode::DigestMismatch: return "DigestMismatch";
    }
    return "Unknown";
}

ErrorKind kind_of(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingShard:
        case ErrorCode::IoFailure:
            return ErrorKind::Io;
        case ErrorCode::BaseRequired:
        case ErrorCode::InvalidParameter:
        case ErrorCode::InvalidPlan:
            return ErrorKind::Usage;
        default:
            return ErrorKind::Data;
    }
}

} // namespace mergelab
