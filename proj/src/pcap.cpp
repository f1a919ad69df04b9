#include "quicsb/pcap.hpp"

#include <cmath>

#include "quicsb/error.hpp"

namespace quicsb::pcap {

namespace {

constexpr uint32_t kMagicMicro = 0xa1b2c3d4;
constexpr uint32_t kMagicNano = 0xa1b23c4d;

uint16_t checksum(ByteView data, uint32_t sum = 0) {
    for (size_t i = 0; i + 1 < data.size(); i += 2) sum += static_cast<uint32_t>(data[i] << 8 | data[i + 1]);
    if (data.size() & 1) sum += static_cast<uint32_t>(data.back() << 8);
    while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<uint16_t>(~sum);
}

void write_ip_header(ByteWriter& w, SocketAddr src, SocketAddr dst, uint8_t proto, size_t total, uint16_t id) {
    Bytes h;
    ByteWriter hw(h);
    hw.u8(0x45);
    hw.u8(0);
    hw.u16(static_cast<uint16_t>(total));
    hw.u16(id);
    hw.u16(0x4000);  // don't fragment
    hw.u8(64);
    hw.u8(proto);
    hw.u16(0);
    hw.u32(src.ip);
    hw.u32(dst.ip);
    uint16_t c = checksum(h);
    h[10] = static_cast<uint8_t>(c >> 8);
    h[11] = static_cast<uint8_t>(c);
    w.bytes(h);
}

uint32_t pseudo_sum(SocketAddr src, SocketAddr dst, uint8_t proto, size_t len) {
    return (src.ip >> 16) + (src.ip & 0xffff) + (dst.ip >> 16) + (dst.ip & 0xffff) + proto +
           static_cast<uint32_t>(len);
}

}  // namespace

Bytes build_udp_packet(SocketAddr src, SocketAddr dst, ByteView payload, uint16_t ip_id) {
    size_t udp_len = kUdpHeader + payload.size();
    Bytes out;
    out.reserve(kIpHeader + udp_len);
    ByteWriter w(out);
    write_ip_header(w, src, dst, kProtoUdp, kIpHeader + udp_len, ip_id);
    size_t udp_at = out.size();
    w.u16(src.port);
    w.u16(dst.port);
    w.u16(static_cast<uint16_t>(udp_len));
    w.u16(0);
    w.bytes(payload);
    uint16_t c = checksum(ByteView(out).subspan(udp_at), pseudo_sum(src, dst, kProtoUdp, udp_len));
    if (c == 0) c = 0xffff;
    out[udp_at + 6] = static_cast<uint8_t>(c >> 8);
    out[udp_at + 7] = static_cast<uint8_t>(c);
    return out;
}

Bytes build_tcp_packet(SocketAddr src, SocketAddr dst, const TcpFields& tcp, ByteView payload, uint16_t ip_id) {
    bool syn = tcp.flags & tcpflag::Syn;
    size_t hdr = syn ? kTcpSynHeader : kTcpHeader;
    size_t tcp_len = hdr + payload.size();
    Bytes out;
    out.reserve(kIpHeader + tcp_len);
    ByteWriter w(out);
    write_ip_header(w, src, dst, kProtoTcp, kIpHeader + tcp_len, ip_id);
    size_t tcp_at = out.size();
    w.u16(src.port);
    w.u16(dst.port);
    w.u32(tcp.seq);
    w.u32(tcp.ack);
    w.u8(static_cast<uint8_t>((hdr / 4) << 4));
    w.u8(tcp.flags);
    w.u16(65535);
    w.u16(0);
    w.u16(0);
    if (syn) {
        w.bytes(Bytes{2, 4, 0x05, 0xb4});  // MSS 1460
        w.bytes(Bytes{4, 2});               // SACK permitted
        w.bytes(Bytes{8, 10});              // timestamps
        w.u32(tcp.ts_val);
        w.u32(tcp.ts_ecr);
        w.bytes(Bytes{1, 3, 3, 7});  // NOP, window scale 7
    } else {
        w.bytes(Bytes{1, 1, 8, 10});
        w.u32(tcp.ts_val);
        w.u32(tcp.ts_ecr);
    }
    w.bytes(payload);
    uint16_t c = checksum(ByteView(out).subspan(tcp_at), pseudo_sum(src, dst, kProtoTcp, tcp_len));
    out[tcp_at + 16] = static_cast<uint8_t>(c >> 8);
    out[tcp_at + 17] = static_cast<uint8_t>(c);
    return out;
}

std::optional<IpPacket> parse_ip(ByteView packet) {
    if (packet.size() < kIpHeader) throw Error(Errc::Truncated, "IPv4 header truncated");
    if ((packet[0] >> 4) != 4) return std::nullopt;
    size_t ihl = (packet[0] & 0x0f) * 4u;
    size_t total = static_cast<size_t>(packet[2] << 8 | packet[3]);
    if (ihl < kIpHeader || total < ihl || total > packet.size()) throw Error(Errc::Truncated, "bad IPv4 lengths");
    IpPacket p;
    p.protocol = packet[9];
    p.total_length = total;
    ByteReader r(packet.subspan(12, 8));
    p.src.ip = r.u32();
    p.dst.ip = r.u32();
    auto l4 = packet.subspan(ihl, total - ihl);
    if (p.protocol == kProtoUdp) {
        if (l4.size() < kUdpHeader) throw Error(Errc::Truncated, "UDP header truncated");
        ByteReader u(l4);
        p.src.port = u.u16();
        p.dst.port = u.u16();
        p.transport_header = kUdpHeader;
    } else if (p.protocol == kProtoTcp) {
        if (l4.size() < 20) throw Error(Errc::Truncated, "TCP header truncated");
        ByteReader t(l4);
        p.src.port = t.u16();
        p.dst.port = t.u16();
        p.tcp_seq = t.u32();
        p.tcp_ack = t.u32();
        size_t doff = (l4[12] >> 4) * 4u;
        if (doff < 20 || doff > l4.size()) throw Error(Errc::Truncated, "bad TCP data offset");
        p.transport_header = doff;
        p.tcp_flags = l4[13];
    } else {
        return std::nullopt;
    }
    p.payload = l4.subspan(p.transport_header);
    return p;
}

Writer::Writer(const std::filesystem::path& path, uint32_t linktype)
    : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error(Errc::Io, "cannot create " + path.string());
    Bytes h;
    ByteWriter w(h);
    // Little-endian header, like most capture tools write on x86.
    auto le32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) w.u8(static_cast<uint8_t>(v >> (8 * i)));
    };
    auto le16 = [&](uint16_t v) {
        w.u8(static_cast<uint8_t>(v));
        w.u8(static_cast<uint8_t>(v >> 8));
    };
    le32(kMagicMicro);
    le16(2);
    le16(4);
    le32(0);
    le32(0);
    le32(65535);
    le32(linktype);
    out_.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
}

void Writer::write(double timestamp, ByteView data) {
    Bytes h;
    ByteWriter w(h);
    auto le32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) w.u8(static_cast<uint8_t>(v >> (8 * i)));
    };
    double secs = std::floor(timestamp);
    le32(static_cast<uint32_t>(secs));
    le32(static_cast<uint32_t>(std::llround((timestamp - secs) * 1e6) % 1000000));
    le32(static_cast<uint32_t>(data.size()));
    le32(static_cast<uint32_t>(data.size()));
    out_.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
    out_.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

Capture parse(ByteView file) {
    if (file.size() < 24) throw Error(Errc::Truncated, "pcap header truncated");
    uint32_t magic_le = static_cast<uint32_t>(file[0]) | static_cast<uint32_t>(file[1]) << 8 |
                        static_cast<uint32_t>(file[2]) << 16 | static_cast<uint32_t>(file[3]) << 24;
    bool little;
    bool nano;
    if (magic_le == kMagicMicro || magic_le == kMagicNano) {
        little = true;
        nano = magic_le == kMagicNano;
    } else {
        uint32_t magic_be = ByteReader(file).u32();
        if (magic_be != kMagicMicro && magic_be != kMagicNano) throw Error(Errc::ParseError, "not a pcap file");
        little = false;
        nano = magic_be == kMagicNano;
    }
    auto rd32 = [&](size_t at) {
        if (at + 4 > file.size()) throw Error(Errc::Truncated, "pcap record truncated");
        if (!little) return ByteReader(file.subspan(at, 4)).u32();
        return static_cast<uint32_t>(file[at]) | static_cast<uint32_t>(file[at + 1]) << 8 |
               static_cast<uint32_t>(file[at + 2]) << 16 | static_cast<uint32_t>(file[at + 3]) << 24;
    };
    Capture c;
    c.linktype = rd32(20) & 0x0fffffff;
    size_t at = 24;
    while (at < file.size()) {
        uint32_t sec = rd32(at);
        uint32_t frac = rd32(at + 4);
        uint32_t incl = rd32(at + 8);
        uint32_t orig = rd32(at + 12);
        at += 16;
        if (at + incl > file.size()) throw Error(Errc::Truncated, "pcap record truncated");
        Record r;
        r.timestamp = sec + frac / (nano ? 1e9 : 1e6);
        r.data.assign(file.begin() + static_cast<ptrdiff_t>(at), file.begin() + static_cast<ptrdiff_t>(at + incl));
        r.original_length = orig;
        c.records.push_back(std::move(r));
        at += incl;
    }
    return c;
}

Capture read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(data);
}

std::optional<ByteView> ip_payload(uint32_t linktype, ByteView frame) {
    switch (linktype) {
    case kLinkRaw:
    case kLinkIpv4:
        return frame;
    case kLinkEthernet: {
        if (frame.size() < 14) throw Error(Errc::Truncated, "Ethernet header truncated");
        size_t at = 12;
        uint16_t type = static_cast<uint16_t>(frame[at] << 8 | frame[at + 1]);
        if (type == 0x8100 && frame.size() >= 18) {
            at += 4;
            type = static_cast<uint16_t>(frame[at] << 8 | frame[at + 1]);
        }
        if (type != 0x0800) return std::nullopt;
        return frame.subspan(at + 2);
    }
    default:
        throw Error(Errc::UnsupportedLinkType, "unsupported link type " + std::to_string(linktype));
    }
}

}  // namespace quicsb::pcap
