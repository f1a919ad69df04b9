#include "quicsb/overhead.hpp"

#include <cmath>
#include <cstdio>

#include "quicsb/error.hpp"

namespace quicsb::overhead {

namespace {

void check_messages(const MessageSet& messages) {
    for (uint64_t m : messages) {
        if (m == 0) throw Error(Errc::InvalidParams, "message sizes must be > 0");
    }
}

uint64_t ceil_div(uint64_t a, uint64_t b) { return a / b + (a % b != 0); }

// Payload room of a QUIC packet: M - (I+U+Qp+s*Qs), as a
// rational since s may be fractional.
Rational quic_room(const OverheadParams& p) {
    return Rational(static_cast<int64_t>(p.mtu) - p.ip - p.udp - p.quic_short) -
           p.streams * static_cast<int64_t>(p.stream_frame);
}

int64_t ceil_rational(const Rational& r) {
    int64_t n = r.numerator();
    int64_t d = r.denominator();  // always > 0
    return n / d + ((n % d != 0 && n > 0) ? 1 : 0);
}

}  // namespace

void validate_tcp(const OverheadParams& p) {
    if (p.tcp < 20 || p.tcp > 40) throw Error(Errc::InvalidParams, "TCP header must be 20..40 bytes");
    if (p.mtu <= p.ip + p.tcp) throw Error(Errc::InvalidParams, "MTU must exceed I+T");
}

void validate_quic(const OverheadParams& p) {
    if (p.quic_short < 3 || p.quic_short > 11) throw Error(Errc::InvalidParams, "QUIC short header must be 3..11 bytes");
    if (p.streams < Rational(1)) throw Error(Errc::InvalidParams, "streams per packet must be >= 1");
    if (quic_room(p) <= Rational(0)) throw Error(Errc::InvalidParams, "MTU must exceed I+U+Qp+s*Qs");
}

uint64_t o_tcp(const MessageSet& messages, const OverheadParams& p) {
    validate_tcp(p);
    check_messages(messages);
    const uint64_t header = p.ip + p.tcp;
    const uint64_t mss = p.mtu - header;
    uint64_t sum = 0;
    for (uint64_t m : messages) sum += header * ceil_div(m, mss);
    return 2 * sum;
}

QuicOverhead o_quic(const MessageSet& messages, const OverheadParams& p) {
    validate_quic(p);
    check_messages(messages);
    const Rational room = quic_room(p);
    const Rational per_packet = Rational(static_cast<int64_t>(p.ip + p.udp + p.quic_short)) / p.streams +
                                static_cast<int64_t>(p.stream_frame);
    int64_t packets = 0;
    for (uint64_t m : messages) packets += ceil_rational(Rational(static_cast<int64_t>(m)) / room);
    return {per_packet * packets};
}

uint64_t QuicOverhead::bytes() const { return static_cast<uint64_t>(ceil_rational(exact)); }

std::string QuicOverhead::fixed2() const {
    // Round half up at the second decimal using integer arithmetic.
    const Rational scaled = exact * 100;
    const int64_t n = scaled.numerator();
    const int64_t d = scaled.denominator();
    int64_t cents = (2 * n + d) / (2 * d);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%lld.%02lld", static_cast<long long>(cents / 100),
                  static_cast<long long>(cents % 100));
    return buf;
}

uint64_t packetization_oracle(const MessageSet& messages, Transport transport, const OverheadParams& p) {
    check_messages(messages);
    uint64_t header_bytes = 0;
    if (transport == Transport::Tcp) {
        validate_tcp(p);
        const uint64_t header = p.ip + p.tcp;
        const uint64_t mss = p.mtu - header;
        for (uint64_t m : messages) {
            for (uint64_t left = m; left > 0;) {
                uint64_t chunk = left < mss ? left : mss;
                left -= chunk;
                header_bytes += header;  // data segment
                header_bytes += header;  // its ACK
            }
        }
        return header_bytes;
    }

    validate_quic(p);
    if (p.streams.denominator() != 1) throw Error(Errc::InvalidParams, "oracle needs an integer stream count");
    const auto per_packet_frames = static_cast<uint64_t>(p.streams.numerator());
    const auto room = static_cast<uint64_t>(ceil_rational(quic_room(p)));  // integer when s is
    // Cut every message into frames, then fill packets frame by frame.
    uint64_t frames_in_packet = 0;
    for (uint64_t m : messages) {
        for (uint64_t left = m; left > 0;) {
            uint64_t chunk = left < room ? left : room;
            left -= chunk;
            if (frames_in_packet == 0) header_bytes += p.ip + p.udp + p.quic_short;
            header_bytes += p.stream_frame;
            if (++frames_in_packet == per_packet_frames) frames_in_packet = 0;
        }
    }
    return header_bytes;
}

double model_error(double predicted, double observed) {
    if (!(observed > 0)) throw Error(Errc::InvalidObservation, "observed overhead must be > 0");
    return std::fabs(predicted - observed) / observed * 100.0;
}

Rational parse_rational(const std::string& text) {
    try {
        if (auto slash = text.find('/'); slash != std::string::npos) {
            return Rational(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
        }
        auto dot = text.find('.');
        if (dot == std::string::npos) return Rational(std::stoll(text));
        std::string frac = text.substr(dot + 1);
        if (frac.size() > 12) frac.resize(12);
        int64_t scale = 1;
        for (size_t i = 0; i < frac.size(); ++i) scale *= 10;
        int64_t whole = dot == 0 ? 0 : std::stoll(text.substr(0, dot));
        int64_t part = frac.empty() ? 0 : std::stoll(frac);
        return Rational(whole * scale + (text[0] == '-' ? -part : part), scale);
    } catch (const std::logic_error&) {
        throw Error(Errc::InvalidParams, "not a number: " + text);
    }
}

}  // namespace quicsb::overhead
