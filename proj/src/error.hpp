#pragma once

#include <stdexcept>
#include <string>

namespace headpatch {

// Error taxonomy shared with the C API (see include/headpatch.h).
enum class ErrorCode {
    Argument,        // bad parameter value
    Dimension,       // tensor shape mismatch
    Configuration,   // invalid configuration value
    State,           // operation invoked in the wrong state (e.g. no active tape)
    Label,           // label outside {0,1}
    Io,              // file unreadable / unwritable
    Format,          // corrupt or wrong-version file
    Schema,          // missing required column / key
    Validation,      // well-formed input violating a domain rule
    Index,           // layer/head out of range
    Stratification,  // stratified split impossible
    Training,        // corpus unusable for training
    Incompatible,    // checkpoint does not match configuration
    Missing,         // expected pipeline artifact not found
    Integrity,       // summary references a dangling artifact
    Internal,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace headpatch
