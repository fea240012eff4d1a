#include "error.hpp"

namespace headpatch {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::Argument: return "argument";
        case ErrorCode::Dimension: return "dimension";
        case ErrorCode::Configuration: return "configuration";
        case ErrorCode::State: return "state";
        case ErrorCode::Label: return "label";
        case ErrorCode::Io: return "io";
        case ErrorCode::Format: return "format";
        case ErrorCode::Schema: return "schema";
        case ErrorCode::Validation: return "validation";
        case ErrorCode::Index: return "index";
        case ErrorCode::Stratification: return "stratification";
        case ErrorCode::Training: return "training";
        case ErrorCode::Incompatible: return "incompatible";
        case ErrorCode::Missing: return "missing";
        case ErrorCode::Integrity: return "integrity";
        case ErrorCode::Internal: return "internal";
    }
    return "unknown";
}

}  // namespace headpatch
