#pragma once

#include <stdexcept>
#include <string>

namespace gluadfl {

enum class Errc {
    InvalidArgument,
    ZeroVariance,
    NonFinite,
    Diverged,
    CalibrationFailed,
    Degenerate,
    ShapeMismatch,
    Io,
    Config,
};

inline const char* to_string(Errc code) noexcept {
    switch (code) {
    case Errc::InvalidArgument: return "invalid argument";
    case Errc::ZeroVariance: return "zero variance";
    case Errc::NonFinite: return "non-finite value";
    case Errc::Diverged: return "diverged";
    case Errc::CalibrationFailed: return "calibration failed";
    case Errc::Degenerate: return "degenerate input";
    case Errc::ShapeMismatch: return "shape mismatch";
    case Errc::Io: return "i/o error";
    case Errc::Config: return "config error";
    }
    return "error";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool cond, Errc code, const std::string& message) {
    if (!cond) raise(code, message);
}

} // namespace gluadfl
