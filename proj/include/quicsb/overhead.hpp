#pragma once

// Closed-form transport overhead models for TCP and QUIC, plus a literal
// packet-by-packet oracle used to check them.

#include <cstdint>
#include <string>
#include <vector>

#include <boost/rational.hpp>

namespace quicsb::overhead {

using Rational = boost::rational<int64_t>;

struct OverheadParams {
    uint32_t ip = 20;            // I
    uint32_t tcp = 32;           // T: 20 base + 12 timestamp option
    uint32_t udp = 8;            // U
    uint32_t quic_short = 11;    // Qp
    uint32_t stream_frame = 4;   // Qs
    uint32_t mtu = 1500;         // M
    Rational streams{1};         // s, average streams per packet
};

/// Message sizes |m_i| in bytes; all strictly positive.
using MessageSet = std::vector<uint64_t>;

enum class Transport { Tcp, Quic };

/// Throws InvalidParams when the TCP-relevant invariants fail.
void validate_tcp(const OverheadParams& p);
/// Throws InvalidParams when the QUIC-relevant invariants fail for p.streams.
void validate_quic(const OverheadParams& p);

/// 2 * sum (I+T) * ceil(|m_i| / (M - (I+T))). Exact integer.
uint64_t o_tcp(const MessageSet& messages, const OverheadParams& p);

struct QuicOverhead {
    Rational exact;

    double value() const { return boost::rational_cast<double>(exact); }
    /// Rounded up to whole bytes.
    uint64_t bytes() const;
    /// Rendered with two decimals, e.g. "23.50".
    std::string fixed2() const;
};

/// sum ceil(m_i / (M - (I+U+Qp+s*Qs))) * ((I+U+Qp)/s + Qs), with s taken
/// from p.streams. Exact rational arithmetic throughout.
QuicOverhead o_quic(const MessageSet& messages, const OverheadParams& p);

/// Literal segmentation with per-packet header accounting. TCP: one data
/// segment per MSS-sized chunk of each message plus one ACK per segment.
/// QUIC: each message is cut into stream frames and frames are packed
/// p.streams per packet (p.streams must be an integer).
uint64_t packetization_oracle(const MessageSet& messages, Transport transport, const OverheadParams& p);

/// |predicted - observed| / observed * 100. Throws InvalidObservation when
/// observed <= 0.
double model_error(double predicted, double observed);

/// Parses "3", "1.25" or "5/4" into an exact rational.
Rational parse_rational(const std::string& text);

}  // namespace quicsb::overhead
