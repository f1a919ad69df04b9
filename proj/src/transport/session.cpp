#include "quicsb/transport/session.hpp"

#include <fstream>
#include <iterator>

#include "quicsb/transport/crypto.hpp"

namespace quicsb::transport {
namespace {

constexpr std::string_view kMagic = "QSB1";

void put_field(ByteWriter& w, ByteView b) {
    w.varint(b.size());
    w.bytes(b);
}

ByteView get_field(ByteReader& r) { return r.bytes(r.varint()); }

}  // namespace

Bytes ResumptionSecret::encode() const {
    ByteWriter w;
    put_field(w, identity);
    put_field(w, psk);
    return w.take();
}

ResumptionSecret ResumptionSecret::decode(ByteView b) {
    ByteReader r(b);
    ResumptionSecret s;
    auto id = get_field(r);
    auto psk = get_field(r);
    s.identity.assign(id.begin(), id.end());
    s.psk.assign(psk.begin(), psk.end());
    return s;
}

Bytes encode_session(const SessionTicket& t) {
    ByteWriter w;
    w.bytes(as_bytes(kMagic));
    put_field(w, as_bytes(t.server_name));
    put_field(w, t.ticket_bytes);
    put_field(w, t.transport_params);
    w.u64(static_cast<uint64_t>(t.issued_at));
    w.bytes(crypto::sha256(w.buf()));
    return w.take();
}

SessionTicket decode_session(ByteView data) {
    try {
        if (data.size() < kMagic.size() + crypto::kHashLen) throw Error(Errc::ParseError, "session file too short");
        auto body = data.subspan(0, data.size() - crypto::kHashLen);
        auto sum = data.subspan(body.size());
        auto expect = crypto::sha256(body);
        if (!std::equal(sum.begin(), sum.end(), expect.begin())) {
            throw Error(Errc::ParseError, "session file checksum mismatch");
        }
        ByteReader r(body);
        if (as_chars(r.bytes(kMagic.size())) != kMagic) throw Error(Errc::ParseError, "bad session magic");
        SessionTicket t;
        auto name = get_field(r);
        t.server_name.assign(name.begin(), name.end());
        auto tb = get_field(r);
        t.ticket_bytes.assign(tb.begin(), tb.end());
        auto tp = get_field(r);
        t.transport_params.assign(tp.begin(), tp.end());
        t.issued_at = static_cast<int64_t>(r.u64());
        if (!r.empty()) throw Error(Errc::ParseError, "trailing bytes in session file");
        return t;
    } catch (const Error& e) {
        if (e.code() == Errc::Truncated) throw Error(Errc::ParseError, "session file truncated");
        throw;
    }
}

void save_session(const std::filesystem::path& path, const SessionTicket& t) {
    auto bytes = encode_session(t);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
}

std::optional<SessionTicket> load_session(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_session(data);
    } catch (const Error&) {
        return std::nullopt;
    }
}

}  // namespace quicsb::transport
