#pragma once

#include <stdexcept>
#include <string>

namespace noisecal {

// Base of every error the library throws. kind() is a stable machine-readable
// tag used by the CLI error JSON.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual const char* kind() const noexcept { return "error"; }
};

#define NOISECAL_DEFINE_ERROR(Name, tag)                                                   \
    class Name : public Error {                                                            \
    public:                                                                                \
        using Error::Error;                                                                \
        [[nodiscard]] const char* kind() const noexcept override { return tag; }           \
    }

NOISECAL_DEFINE_ERROR(InvalidArgument, "invalid-argument");
NOISECAL_DEFINE_ERROR(ShapeError, "shape-error");
NOISECAL_DEFINE_ERROR(InvalidState, "invalid-state");
NOISECAL_DEFINE_ERROR(FormatError, "format-error");
NOISECAL_DEFINE_ERROR(CorruptData, "corrupt-data");
NOISECAL_DEFINE_ERROR(ConfigError, "config-error");
NOISECAL_DEFINE_ERROR(NonFiniteError, "non-finite");
NOISECAL_DEFINE_ERROR(IoError, "io-error");

#undef NOISECAL_DEFINE_ERROR

} // namespace noisecal
