#pragma once

// QUIC v1 style packet headers and frames.

#include <array>
#include <optional>
#include <variant>
#include <vector>

#include "quicsb/bytes.hpp"

namespace quicsb::transport {

constexpr uint32_t kVersion = 0x00000001;
constexpr size_t kServerCidLen = 8;
constexpr size_t kPacketNumberLen = 2;
constexpr size_t kMinInitialDatagram = 1200;

enum class HeaderForm { Long, Short };
enum class PacketType { Initial, ZeroRtt, Handshake, OneRtt };
enum class Space { Initial = 0, Handshake = 1, Application = 2 };

Space space_of(PacketType t);

/// Long iff the most significant bit of octet 0 is set. Throws Truncated on
/// an empty packet.
HeaderForm detect_header(ByteView packet);

struct PacketHeader {
    PacketType type = PacketType::OneRtt;
    uint32_t version = kVersion;
    Bytes dcid;
    Bytes scid;
    Bytes token;
    uint64_t truncated_pn = 0;
    size_t pn_len = kPacketNumberLen;
};

/// One packet cut out of a (possibly coalesced) datagram.
struct RawPacket {
    PacketHeader header;
    ByteView header_bytes;  // authenticated as associated data
    ByteView ciphertext;    // payload plus AEAD tag
    size_t total_len = 0;
};

/// Splits the packet at the front of data. short_dcid_len is the connection
/// id length the receiver issued, needed to parse short headers.
RawPacket parse_packet(ByteView data, size_t short_dcid_len);

/// Writes a long header whose Length field covers pn and protected payload.
void write_long_header(ByteWriter& w, const PacketHeader& h, uint64_t pn, size_t protected_payload_len);
void write_short_header(ByteWriter& w, ByteView dcid, uint64_t pn);
size_t long_header_size(const PacketHeader& h, size_t protected_payload_len);
inline size_t short_header_size(size_t dcid_len) { return 1 + dcid_len + kPacketNumberLen; }

/// Recovers a full packet number from its truncated encoding.
uint64_t decode_packet_number(uint64_t largest_received, uint64_t truncated, size_t pn_len);

namespace frame {

struct Padding {
    size_t length = 1;
};
struct Ping {};
struct Ack {
    uint64_t largest = 0;
    uint64_t delay = 0;  // microseconds >> ack delay exponent (3)
    /// Inclusive [low, high] ranges, highest first.
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
};
struct Crypto {
    uint64_t offset = 0;
    ByteView data;
};
struct Stream {
    uint64_t id = 0;
    uint64_t offset = 0;
    ByteView data;
    bool fin = false;
};
struct PathChallenge {
    std::array<uint8_t, 8> data{};
};
struct PathResponse {
    std::array<uint8_t, 8> data{};
};
struct ConnectionClose {
    uint64_t error_code = 0;
    uint64_t frame_type = 0;
    std::string reason;
};
struct HandshakeDone {};

}  // namespace frame

using Frame = std::variant<frame::Padding, frame::Ping, frame::Ack, frame::Crypto, frame::Stream,
                           frame::PathChallenge, frame::PathResponse, frame::ConnectionClose, frame::HandshakeDone>;

/// Parses every frame in a decrypted payload. Views point into payload.
std::vector<Frame> parse_frames(ByteView payload);

void write_ack(ByteWriter& w, const frame::Ack& a);
void write_crypto(ByteWriter& w, uint64_t offset, ByteView data);
/// STREAM frame; the Length field is omitted when last is true.
void write_stream(ByteWriter& w, uint64_t id, uint64_t offset, ByteView data, bool fin, bool last);
size_t stream_header_size(uint64_t id, uint64_t offset, size_t len, bool last);
size_t crypto_header_size(uint64_t offset, size_t len);
void write_path_challenge(ByteWriter& w, const std::array<uint8_t, 8>& d);
void write_path_response(ByteWriter& w, const std::array<uint8_t, 8>& d);
void write_connection_close(ByteWriter& w, const frame::ConnectionClose& c);

bool is_ack_eliciting(const Frame& f);

/// Frame type bytes, used by the capture analyzer.
constexpr uint8_t kFrameStreamMin = 0x08;
constexpr uint8_t kFrameStreamMax = 0x0f;

}  // namespace quicsb::transport
