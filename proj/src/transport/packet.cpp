#include "quicsb/transport/packet.hpp"

namespace quicsb::transport {

Space space_of(PacketType t) {
    switch (t) {
        case PacketType::Initial:
            return Space::Initial;
        case PacketType::Handshake:
            return Space::Handshake;
        default:
            return Space::Application;
    }
}

HeaderForm detect_header(ByteView packet) {
    if (packet.empty()) throw Error(Errc::Truncated, "empty packet");
    return (packet[0] & 0x80) ? HeaderForm::Long : HeaderForm::Short;
}

namespace {

uint8_t long_type_bits(PacketType t) {
    switch (t) {
        case PacketType::Initial:
            return 0;
        case PacketType::ZeroRtt:
            return 1;
        case PacketType::Handshake:
            return 2;
        default:
            throw Error(Errc::ProtocolViolation, "not a long header type");
    }
}

uint64_t read_pn(ByteReader& r, size_t len) {
    uint64_t v = 0;
    for (size_t i = 0; i < len; ++i) v = (v << 8) | r.u8();
    return v;
}

void write_pn(ByteWriter& w, uint64_t pn, size_t len) {
    for (size_t i = len; i-- > 0;) w.u8(static_cast<uint8_t>(pn >> (8 * i)));
}

}  // namespace

RawPacket parse_packet(ByteView data, size_t short_dcid_len) {
    ByteReader r(data);
    RawPacket out;
    const uint8_t first = r.u8();
    out.header.pn_len = (first & 0x03) + 1;
    if (first & 0x80) {
        out.header.version = r.u32();
        if (out.header.version != kVersion) throw Error(Errc::ProtocolViolation, "unsupported version");
        switch ((first >> 4) & 0x03) {
            case 0:
                out.header.type = PacketType::Initial;
                break;
            case 1:
                out.header.type = PacketType::ZeroRtt;
                break;
            case 2:
                out.header.type = PacketType::Handshake;
                break;
            default:
                throw Error(Errc::ProtocolViolation, "retry not supported");
        }
        auto dl = r.u8();
        if (dl > 20) throw Error(Errc::ProtocolViolation, "cid too long");
        auto d = r.bytes(dl);
        out.header.dcid.assign(d.begin(), d.end());
        auto sl = r.u8();
        if (sl > 20) throw Error(Errc::ProtocolViolation, "cid too long");
        auto s = r.bytes(sl);
        out.header.scid.assign(s.begin(), s.end());
        if (out.header.type == PacketType::Initial) {
            auto t = r.bytes(r.varint());
            out.header.token.assign(t.begin(), t.end());
        }
        uint64_t length = r.varint();
        if (length < out.header.pn_len || length > r.remaining()) throw Error(Errc::Truncated, "bad packet length");
        size_t pn_at = r.position();
        out.header.truncated_pn = read_pn(r, out.header.pn_len);
        out.header_bytes = data.subspan(0, r.position());
        out.ciphertext = data.subspan(r.position(), length - out.header.pn_len);
        out.total_len = pn_at + length;
    } else {
        out.header.type = PacketType::OneRtt;
        auto d = r.bytes(short_dcid_len);
        out.header.dcid.assign(d.begin(), d.end());
        out.header.truncated_pn = read_pn(r, out.header.pn_len);
        out.header_bytes = data.subspan(0, r.position());
        out.ciphertext = data.subspan(r.position());
        out.total_len = data.size();
    }
    return out;
}

size_t long_header_size(const PacketHeader& h, size_t protected_payload_len) {
    size_t n = 1 + 4 + 1 + h.dcid.size() + 1 + h.scid.size();
    if (h.type == PacketType::Initial) n += varint_size(h.token.size()) + h.token.size();
    n += varint_size(kPacketNumberLen + protected_payload_len) + kPacketNumberLen;
    return n;
}

void write_long_header(ByteWriter& w, const PacketHeader& h, uint64_t pn, size_t protected_payload_len) {
    w.u8(static_cast<uint8_t>(0xC0 | (long_type_bits(h.type) << 4) | (kPacketNumberLen - 1)));
    w.u32(h.version);
    w.u8(static_cast<uint8_t>(h.dcid.size()));
    w.bytes(h.dcid);
    w.u8(static_cast<uint8_t>(h.scid.size()));
    w.bytes(h.scid);
    if (h.type == PacketType::Initial) {
        w.varint(h.token.size());
        w.bytes(h.token);
    }
    w.varint(kPacketNumberLen + protected_payload_len);
    write_pn(w, pn, kPacketNumberLen);
}

void write_short_header(ByteWriter& w, ByteView dcid, uint64_t pn) {
    w.u8(static_cast<uint8_t>(0x40 | (kPacketNumberLen - 1)));
    w.bytes(dcid);
    write_pn(w, pn, kPacketNumberLen);
}

uint64_t decode_packet_number(uint64_t largest_received, uint64_t truncated, size_t pn_len) {
    const uint64_t expected = largest_received + 1;
    const uint64_t win = uint64_t{1} << (pn_len * 8);
    const uint64_t hwin = win / 2;
    const uint64_t mask = win - 1;
    const uint64_t candidate = (expected & ~mask) | truncated;
    if (candidate + hwin <= expected && candidate < (uint64_t{1} << 62) - win) return candidate + win;
    if (candidate > expected + hwin && candidate >= win) return candidate - win;
    return candidate;
}

std::vector<Frame> parse_frames(ByteView payload) {
    std::vector<Frame> frames;
    ByteReader r(payload);
    while (!r.empty()) {
        uint64_t type = r.varint();
        if (type == 0x00) {
            size_t n = 1;
            while (!r.empty() && payload[r.position()] == 0) {
                r.skip(1);
                ++n;
            }
            frames.emplace_back(frame::Padding{n});
        } else if (type == 0x01) {
            frames.emplace_back(frame::Ping{});
        } else if (type == 0x02 || type == 0x03) {
            frame::Ack a;
            a.largest = r.varint();
            a.delay = r.varint();
            uint64_t count = r.varint();
            uint64_t first = r.varint();
            if (first > a.largest) throw Error(Errc::ProtocolViolation, "bad ack range");
            uint64_t hi = a.largest;
            uint64_t lo = hi - first;
            a.ranges.emplace_back(lo, hi);
            for (uint64_t i = 0; i < count; ++i) {
                uint64_t gap = r.varint();
                uint64_t len = r.varint();
                if (lo < gap + 2) throw Error(Errc::ProtocolViolation, "bad ack gap");
                hi = lo - gap - 2;
                if (hi < len) throw Error(Errc::ProtocolViolation, "bad ack range");
                lo = hi - len;
                a.ranges.emplace_back(lo, hi);
            }
            if (type == 0x03) {
                r.varint();
                r.varint();
                r.varint();
            }
            frames.emplace_back(std::move(a));
        } else if (type == 0x06) {
            frame::Crypto c;
            c.offset = r.varint();
            c.data = r.bytes(r.varint());
            frames.emplace_back(c);
        } else if (type >= kFrameStreamMin && type <= kFrameStreamMax) {
            frame::Stream s;
            s.id = r.varint();
            if (type & 0x04) s.offset = r.varint();
            s.data = (type & 0x02) ? r.bytes(r.varint()) : r.rest();
            s.fin = type & 0x01;
            frames.emplace_back(s);
        } else if (type == 0x1a || type == 0x1b) {
            std::array<uint8_t, 8> d{};
            auto b = r.bytes(8);
            std::copy(b.begin(), b.end(), d.begin());
            if (type == 0x1a) {
                frames.emplace_back(frame::PathChallenge{d});
            } else {
                frames.emplace_back(frame::PathResponse{d});
            }
        } else if (type == 0x1c || type == 0x1d) {
            frame::ConnectionClose c;
            c.error_code = r.varint();
            if (type == 0x1c) c.frame_type = r.varint();
            auto reason = r.bytes(r.varint());
            c.reason.assign(reason.begin(), reason.end());
            frames.emplace_back(std::move(c));
        } else if (type == 0x1e) {
            frames.emplace_back(frame::HandshakeDone{});
        } else {
            throw Error(Errc::ProtocolViolation, "unknown frame type " + std::to_string(type));
        }
    }
    return frames;
}

void write_ack(ByteWriter& w, const frame::Ack& a) {
    w.u8(0x02);
    w.varint(a.largest);
    w.varint(a.delay);
    w.varint(a.ranges.size() - 1);
    w.varint(a.ranges[0].second - a.ranges[0].first);
    for (size_t i = 1; i < a.ranges.size(); ++i) {
        w.varint(a.ranges[i - 1].first - a.ranges[i].second - 2);
        w.varint(a.ranges[i].second - a.ranges[i].first);
    }
}

void write_crypto(ByteWriter& w, uint64_t offset, ByteView data) {
    w.u8(0x06);
    w.varint(offset);
    w.varint(data.size());
    w.bytes(data);
}

size_t crypto_header_size(uint64_t offset, size_t len) { return 1 + varint_size(offset) + varint_size(len); }

void write_stream(ByteWriter& w, uint64_t id, uint64_t offset, ByteView data, bool fin, bool last) {
    uint8_t type = kFrameStreamMin;
    if (offset) type |= 0x04;
    if (!last) type |= 0x02;
    if (fin) type |= 0x01;
    w.u8(type);
    w.varint(id);
    if (offset) w.varint(offset);
    if (!last) w.varint(data.size());
    w.bytes(data);
}

size_t stream_header_size(uint64_t id, uint64_t offset, size_t len, bool last) {
    return 1 + varint_size(id) + (offset ? varint_size(offset) : 0) + (last ? 0 : varint_size(len));
}

void write_path_challenge(ByteWriter& w, const std::array<uint8_t, 8>& d) {
    w.u8(0x1a);
    w.bytes(d);
}

void write_path_response(ByteWriter& w, const std::array<uint8_t, 8>& d) {
    w.u8(0x1b);
    w.bytes(d);
}

void write_connection_close(ByteWriter& w, const frame::ConnectionClose& c) {
    w.u8(0x1c);
    w.varint(c.error_code);
    w.varint(c.frame_type);
    w.varint(c.reason.size());
    w.bytes(as_bytes(c.reason));
}

bool is_ack_eliciting(const Frame& f) {
    return !std::holds_alternative<frame::Padding>(f) && !std::holds_alternative<frame::Ack>(f) &&
           !std::holds_alternative<frame::ConnectionClose>(f);
}

}  // namespace quicsb::transport
