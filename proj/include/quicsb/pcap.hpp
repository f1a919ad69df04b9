#pragma once

// Classic pcap files and the IPv4/UDP/TCP headers written into them.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include "quicsb/bytes.hpp"
#include "quicsb/net.hpp"

namespace quicsb::pcap {

inline constexpr uint32_t kLinkEthernet = 1;
inline constexpr uint32_t kLinkRaw = 101;
inline constexpr uint32_t kLinkIpv4 = 228;

inline constexpr uint8_t kProtoTcp = 6;
inline constexpr uint8_t kProtoUdp = 17;

inline constexpr size_t kIpHeader = 20;
inline constexpr size_t kUdpHeader = 8;
/// Data segments carry the timestamp option.
inline constexpr size_t kTcpHeader = 32;
/// SYN segments carry MSS, SACK-permitted, timestamps and window scale.
inline constexpr size_t kTcpSynHeader = 40;

namespace tcpflag {
inline constexpr uint8_t Fin = 0x01;
inline constexpr uint8_t Syn = 0x02;
inline constexpr uint8_t Rst = 0x04;
inline constexpr uint8_t Psh = 0x08;
inline constexpr uint8_t Ack = 0x10;
}  // namespace tcpflag

struct TcpFields {
    uint32_t seq = 0;
    uint32_t ack = 0;
    uint8_t flags = tcpflag::Ack;
    uint32_t ts_val = 0;
    uint32_t ts_ecr = 0;
};

Bytes build_udp_packet(SocketAddr src, SocketAddr dst, ByteView payload, uint16_t ip_id = 0);
Bytes build_tcp_packet(SocketAddr src, SocketAddr dst, const TcpFields& tcp, ByteView payload, uint16_t ip_id = 0);

/// A parsed IPv4 packet. Views point into the source buffer.
struct IpPacket {
    SocketAddr src;
    SocketAddr dst;
    uint8_t protocol = 0;
    size_t total_length = 0;      // IP total length
    size_t transport_header = 0;  // UDP 8, TCP data offset
    uint8_t tcp_flags = 0;
    uint32_t tcp_seq = 0;
    uint32_t tcp_ack = 0;
    ByteView payload;             // transport payload
};

/// Returns nullopt for non-IPv4 or non-TCP/UDP packets. Throws Truncated on
/// inconsistent lengths.
std::optional<IpPacket> parse_ip(ByteView packet);

struct Record {
    double timestamp = 0;  // seconds
    Bytes data;            // captured bytes (link layer included)
    uint32_t original_length = 0;
};

class Writer {
  public:
    /// Throws Io when the file cannot be created.
    explicit Writer(const std::filesystem::path& path, uint32_t linktype = kLinkRaw);
    void write(double timestamp, ByteView data);
    void flush() { out_.flush(); }

  private:
    std::ofstream out_;
};

struct Capture {
    uint32_t linktype = 0;
    std::vector<Record> records;
};

/// Reads both byte orders and microsecond or nanosecond resolution.
/// Throws Io, ParseError or Truncated.
Capture read(const std::filesystem::path& path);
Capture parse(ByteView file);

/// Strips the link layer. Returns nullopt for non-IPv4 frames. Throws
/// UnsupportedLinkType.
std::optional<ByteView> ip_payload(uint32_t linktype, ByteView frame);

}  // namespace quicsb::pcap
