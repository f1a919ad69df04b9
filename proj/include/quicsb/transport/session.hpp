#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "quicsb/bytes.hpp"

namespace quicsb::transport {

/// Resumption state persisted between connections.
struct SessionTicket {
    std::string server_name;
    Bytes ticket_bytes;      // see ResumptionSecret
    Bytes transport_params;  // peer transport parameters, opaque here
    int64_t issued_at = 0;   // unix seconds

    bool operator==(const SessionTicket&) const = default;
};

/// What ticket_bytes carries: the server-encrypted identity and the PSK the
/// client keeps for itself.
struct ResumptionSecret {
    Bytes identity;
    Bytes psk;

    Bytes encode() const;
    static ResumptionSecret decode(ByteView b);
};

inline const std::filesystem::path kDefaultSessionFile = "quicsb-session.bin";

Bytes encode_session(const SessionTicket& t);
/// Throws ParseError on bad magic, truncation or checksum mismatch.
SessionTicket decode_session(ByteView data);

void save_session(const std::filesystem::path& path, const SessionTicket& t);
/// Missing or corrupt files yield nullopt; never throws for bad content.
std::optional<SessionTicket> load_session(const std::filesystem::path& path);

}  // namespace quicsb::transport
