#include "quicsb/error.hpp"

namespace quicsb {

std::string_view to_string(Errc code) {
    switch (code) {
        case Errc::BodyTooLarge: return "BodyTooLarge";
        case Errc::Truncated: return "Truncated";
        case Errc::BadLength: return "BadLength";
        case Errc::ParseError: return "ParseError";
        case Errc::IdSpaceExhausted: return "IdSpaceExhausted";
        case Errc::OddStreamId: return "OddStreamId";
        case Errc::PolicyViolation: return "PolicyViolation";
        case Errc::KeysUnavailable: return "KeysUnavailable";
        case Errc::AuthenticationFailed: return "AuthenticationFailed";
        case Errc::HandshakeTimeout: return "HandshakeTimeout";
        case Errc::HandshakeIncomplete: return "HandshakeIncomplete";
        case Errc::TicketRejected: return "TicketRejected";
        case Errc::PathValidationTimeout: return "PathValidationTimeout";
        case Errc::Closed: return "Closed";
        case Errc::ProtocolViolation: return "ProtocolViolation";
        case Errc::InvalidParams: return "InvalidParams";
        case Errc::InvalidObservation: return "InvalidObservation";
        case Errc::UnknownScheme: return "UnknownScheme";
        case Errc::BindFailure: return "BindFailure";
        case Errc::BadCredentials: return "BadCredentials";
        case Errc::UnknownOrigin: return "UnknownOrigin";
        case Errc::UnknownStream: return "UnknownStream";
        case Errc::FlowControlBlocked: return "FlowControlBlocked";
        case Errc::NoBoundStream: return "NoBoundStream";
        case Errc::UnsupportedLinkType: return "UnsupportedLinkType";
        case Errc::EmptyCapture: return "EmptyCapture";
        case Errc::MissingPair: return "MissingPair";
        case Errc::LaunchFailure: return "LaunchFailure";
        case Errc::AccountingGap: return "AccountingGap";
        case Errc::ResumeFailure: return "ResumeFailure";
        case Errc::InvalidConfig: return "InvalidConfig";
        case Errc::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace quicsb
