#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace quicsb {

enum class Errc {
    BodyTooLarge,
    Truncated,
    BadLength,
    ParseError,
    IdSpaceExhausted,
    OddStreamId,
    PolicyViolation,
    KeysUnavailable,
    AuthenticationFailed,
    HandshakeTimeout,
    HandshakeIncomplete,
    TicketRejected,
    PathValidationTimeout,
    Closed,
    ProtocolViolation,
    InvalidParams,
    InvalidObservation,
    UnknownScheme,
    BindFailure,
    BadCredentials,
    UnknownOrigin,
    UnknownStream,
    FlowControlBlocked,
    NoBoundStream,
    UnsupportedLinkType,
    EmptyCapture,
    MissingPair,
    LaunchFailure,
    AccountingGap,
    ResumeFailure,
    InvalidConfig,
    Io,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    explicit Error(Errc code) : Error(code, std::string(to_string(code))) {}

    Errc code() const noexcept { return code_; }

  private:
    Errc code_;
};

}  // namespace quicsb
