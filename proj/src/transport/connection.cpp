#include "quicsb/transport/connection.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

namespace quicsb::transport {
namespace icl = boost::icl;

namespace {

constexpr uint8_t kInitialSalt[] = {0x38, 0x76, 0x2c, 0xf7, 0xf5, 0x59, 0x34, 0xb3, 0x4d, 0x17,
                                    0x9a, 0xe6, 0xa4, 0xc8, 0x0c, 0xad, 0xcc, 0xbb, 0x7f, 0x0a};

enum : uint8_t {
    kClientHello = 1,
    kServerHello = 2,
    kNewSessionTicket = 4,
    kEncryptedExtensions = 8,
    kCertificate = 11,
    kCertificateVerify = 15,
    kFinished = 20,
};

constexpr uint8_t kFlagPsk = 0x01;
constexpr uint8_t kFlagEarlyData = 0x02;
constexpr std::string_view kVerifyContext = "quicsb server CertificateVerify";
constexpr size_t kMaxAckRanges = 32;
constexpr size_t kMaxReceivedIntervals = 64;
constexpr size_t kMaxUndecryptable = 16;
constexpr Duration kGranularity = 1ms;

size_t idx(Space s) { return static_cast<size_t>(s); }

Bytes empty_hash() { return crypto::sha256({}); }

Bytes finished_mac(const Bytes& traffic_secret, const Bytes& transcript_hash) {
    auto key = crypto::hkdf_expand_label(traffic_secret, "finished", {}, crypto::kHashLen);
    return crypto::hmac_sha256(key, transcript_hash);
}

void put_field(ByteWriter& w, ByteView b) {
    w.varint(b.size());
    w.bytes(b);
}

ByteView get_field(ByteReader& r) { return r.bytes(r.varint()); }

int64_t system_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

uint64_t errc_to_wire(Errc e) { return e == Errc::Closed ? 0 : static_cast<uint64_t>(e) + 1; }

Errc wire_to_errc(uint64_t code) {
    if (code == 0 || code > static_cast<uint64_t>(Errc::Io) + 1) return Errc::Closed;
    return static_cast<Errc>(code - 1);
}

Bytes ticket_key(const Bytes& ticket_secret) {
    return crypto::hkdf_expand_label(ticket_secret, "ticket key", {}, crypto::kKeyLen);
}

}  // namespace

std::string_view to_string(HandshakePhase p) {
    switch (p) {
        case HandshakePhase::InitialKeyAgreement:
            return "InitialKeyAgreement";
        case HandshakePhase::InitialDataExchange:
            return "InitialDataExchange";
        case HandshakePhase::KeyAgreement:
            return "KeyAgreement";
        case HandshakePhase::DataExchange:
            return "DataExchange";
    }
    return "?";
}

std::shared_ptr<ServerContext> ServerContext::load(const std::filesystem::path& key_pem,
                                                   const std::filesystem::path& cert_pem) {
    auto ctx = std::make_shared<ServerContext>();
    ctx->credentials = crypto::Credentials::load(key_pem, cert_pem);
    // Derived from the key file so tickets outlive a server restart.
    Bytes ikm = ctx->credentials.certificate_der;
    std::ifstream in(key_pem, std::ios::binary);
    Bytes pem((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ikm.insert(ikm.end(), pem.begin(), pem.end());
    ctx->ticket_secret = crypto::hkdf_extract(as_bytes("quicsb ticket"), ikm);
    return ctx;
}

// ---------------------------------------------------------------------------
// Buffers

void Connection::SendBuffer::on_acked(uint64_t offset, uint64_t length) {
    if (length == 0) return;
    auto iv = boost::icl::interval<uint64_t>::right_open(offset, offset + length);
    acked += iv;
    retransmit -= iv;
    auto first = acked.begin();
    if (first != acked.end() && icl::first(*first) <= acked_to && icl::last(*first) + 1 > acked_to) {
        acked_to = icl::last(*first) + 1;
        acked -= boost::icl::interval<uint64_t>::right_open(0, acked_to);
        uint64_t dead = acked_to - base;
        if (dead > (1u << 20) && dead * 2 > data.size()) {
            data.erase(data.begin(), data.begin() + static_cast<ptrdiff_t>(dead));
            base = acked_to;
        }
    }
}

void Connection::SendBuffer::on_lost(uint64_t offset, uint64_t length) {
    if (length == 0) return;
    RangeSet r;
    r += boost::icl::interval<uint64_t>::right_open(std::max(offset, acked_to), std::max(offset + length, acked_to));
    r -= acked;
    retransmit += r;
}

ByteView Connection::SendBuffer::view(uint64_t offset, uint64_t length) const {
    return ByteView(data).subspan(offset - base, length);
}

bool Connection::RecvBuffer::insert(uint64_t offset, ByteView d) {
    uint64_t end = offset + d.size();
    if (end <= contiguous) return false;
    if (offset > contiguous) {
        auto& slot = pending[offset];
        if (slot.size() < d.size()) slot.assign(d.begin(), d.end());
        return false;
    }
    auto skip = contiguous - offset;
    ready.insert(ready.end(), d.begin() + static_cast<ptrdiff_t>(skip), d.end());
    contiguous = end;
    while (!pending.empty() && pending.begin()->first <= contiguous) {
        auto node = pending.extract(pending.begin());
        uint64_t e = node.key() + node.mapped().size();
        if (e > contiguous) {
            auto s = contiguous - node.key();
            ready.insert(ready.end(), node.mapped().begin() + static_cast<ptrdiff_t>(s), node.mapped().end());
            contiguous = e;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Construction

Connection::Connection(Role role, const ConnectionConfig& cfg, TimePoint now, KeyLogger keylog)
    : role_(role),
      cfg_(cfg),
      keylog_(std::move(keylog)),
      smoothed_rtt_(cfg.initial_rtt),
      rttvar_(cfg.initial_rtt / 2),
      cwnd_(std::min<size_t>(10 * cfg.max_udp_payload, std::max<size_t>(14720, 2 * cfg.max_udp_payload))),
      created_at_(now),
      last_activity_(now) {
    if (!cfg_.wall_clock) cfg_.wall_clock = system_seconds;
    next_local_stream_ = role == Role::Client ? 0 : 1;
    stats_.started_at = now;
}

Connection::~Connection() = default;

std::unique_ptr<Connection> Connection::connect(const ConnectionConfig& cfg, SocketAddr local, SocketAddr remote,
                                                const std::optional<SessionTicket>& ticket, TimePoint now,
                                                KeyLogger keylog) {
    std::unique_ptr<Connection> c(new Connection(Role::Client, cfg, now, std::move(keylog)));
    c->path_ = {local, remote, false};
    c->start_client(ticket, now);
    return c;
}

std::unique_ptr<Connection> Connection::accept(const ConnectionConfig& cfg, std::shared_ptr<const ServerContext> ctx,
                                               SocketAddr local, SocketAddr remote, const Bytes& original_dcid,
                                               const Bytes& client_scid, TimePoint now, KeyLogger keylog) {
    std::unique_ptr<Connection> c(new Connection(Role::Server, cfg, now, std::move(keylog)));
    c->server_ctx_ = std::move(ctx);
    c->path_ = {local, remote, false};
    c->original_dcid_ = original_dcid;
    c->remote_cid_ = client_scid;
    c->local_cid_ = crypto::random_bytes(kServerCidLen);
    auto initial = crypto::hkdf_extract(kInitialSalt, original_dcid);
    auto client_in = crypto::hkdf_expand_label(initial, "client in", {}, crypto::kHashLen);
    auto server_in = crypto::hkdf_expand_label(initial, "server in", {}, crypto::kHashLen);
    c->install_keys(Space::Initial, server_in, client_in, HandshakePhase::InitialDataExchange);
    c->ecdhe_ = crypto::X25519::generate();
    return c;
}

void Connection::start_client(const std::optional<SessionTicket>& ticket, TimePoint now) {
    original_dcid_ = crypto::random_bytes(kServerCidLen);
    remote_cid_ = original_dcid_;
    auto initial = crypto::hkdf_extract(kInitialSalt, original_dcid_);
    auto client_in = crypto::hkdf_expand_label(initial, "client in", {}, crypto::kHashLen);
    auto server_in = crypto::hkdf_expand_label(initial, "server in", {}, crypto::kHashLen);
    install_keys(Space::Initial, client_in, server_in, HandshakePhase::InitialDataExchange);
    ecdhe_ = crypto::X25519::generate();

    if (ticket && ticket->server_name == cfg_.server_name) {
        int64_t age = cfg_.wall_clock() - ticket->issued_at;
        if (age >= 0 && age < cfg_.ticket_lifetime.count()) {
            try {
                offered_psk_ = ResumptionSecret::decode(ticket->ticket_bytes);
                offered_ticket_ = ticket;
                decode_transport_params(ticket->transport_params);
            } catch (const Error&) {
                offered_psk_.reset();
            }
        }
    }
    early_secret_ = crypto::hkdf_extract({}, offered_psk_ ? ByteView(offered_psk_->psk) : ByteView{});

    ByteWriter body;
    body.bytes(crypto::random_bytes(32));
    body.bytes(ecdhe_.public_key);
    uint8_t flags = offered_psk_ ? (kFlagPsk | kFlagEarlyData) : 0;
    body.u8(flags);
    put_field(body, offered_psk_ ? ByteView(offered_psk_->identity) : ByteView{});
    put_field(body, encode_transport_params());
    if (offered_psk_) {
        // Binder covers the message up to the binder itself.
        ByteWriter partial;
        partial.u8(kClientHello);
        partial.u24(static_cast<uint32_t>(body.size() + crypto::kHashLen));
        partial.bytes(body.buf());
        auto binder_key = crypto::derive_secret(early_secret_, "res binder", empty_hash());
        body.bytes(finished_mac(binder_key, crypto::sha256(partial.buf())));
    }
    send_handshake_message(Space::Initial, kClientHello, body.buf());

    if (offered_psk_) {
        early_data_offered_ = true;
        auto early = crypto::derive_secret(early_secret_, "c e traffic", transcript_hash());
        zero_rtt_ = crypto::Aead::from_secret(early);
        if (keylog_) keylog_("CLIENT_EARLY_TRAFFIC_SECRET", original_dcid_, early);
    }
    (void)now;
}

void Connection::install_keys(Space space, const Bytes& write_secret, const Bytes& read_secret,
                              HandshakePhase phase) {
    auto& ps = spaces_[idx(space)];
    ps.seal = crypto::Aead::from_secret(write_secret);
    ps.open = crypto::Aead::from_secret(read_secret);
    phase_keys_[static_cast<size_t>(phase)] = std::make_pair(*ps.seal, *ps.open);
    advance_phase(phase);
}

void Connection::advance_phase(HandshakePhase p) {
    if (static_cast<int>(p) > static_cast<int>(phase_)) phase_ = p;
}

Bytes Connection::transcript_hash() const { return crypto::sha256(transcript_); }

Bytes Connection::encode_transport_params() const {
    ByteWriter w;
    w.varint(static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(cfg_.max_ack_delay).count()));
    w.varint(static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(cfg_.idle_timeout).count()));
    return w.take();
}

void Connection::decode_transport_params(ByteView b) {
    peer_transport_params_.assign(b.begin(), b.end());
    if (b.empty()) return;
    ByteReader r(b);
    peer_max_ack_delay_ = std::chrono::milliseconds(r.varint());
}

void Connection::send_handshake_message(Space space, uint8_t type, ByteView body, bool add_to_transcript) {
    ByteWriter m;
    m.u8(type);
    m.u24(static_cast<uint32_t>(body.size()));
    m.bytes(body);
    auto& cs = spaces_[idx(space)].crypto_send;
    cs.data.insert(cs.data.end(), m.buf().begin(), m.buf().end());
    cs.written += m.size();
    if (add_to_transcript) transcript_.insert(transcript_.end(), m.buf().begin(), m.buf().end());
}

void Connection::on_crypto_data(Space space, TimePoint now) {
    auto& rb = spaces_[idx(space)].crypto_recv;
    size_t pos = 0;
    while (rb.ready.size() - pos >= 4) {
        uint8_t type = rb.ready[pos];
        uint32_t len = (uint32_t{rb.ready[pos + 1]} << 16) | (uint32_t{rb.ready[pos + 2]} << 8) | rb.ready[pos + 3];
        if (rb.ready.size() - pos < 4 + len) break;
        Bytes whole(rb.ready.begin() + static_cast<ptrdiff_t>(pos),
                    rb.ready.begin() + static_cast<ptrdiff_t>(pos + 4 + len));
        pos += 4 + len;
        handle_handshake_message(space, type, ByteView(whole).subspan(4), whole, now);
        if (state_ == State::Closing || state_ == State::Closed) break;
    }
    rb.ready.erase(rb.ready.begin(), rb.ready.begin() + static_cast<ptrdiff_t>(pos));
}

void Connection::handle_handshake_message(Space space, uint8_t type, ByteView body, ByteView whole, TimePoint now) {
    try {
        if (role_ == Role::Server) {
            if (space == Space::Initial && type == kClientHello && transcript_.empty()) {
                on_client_hello(body, whole, now);
            } else if (space == Space::Handshake && type == kFinished && !handshake_complete_) {
                on_finished(body, whole, now);
            } else {
                throw Error(Errc::ProtocolViolation, "unexpected handshake message");
            }
            return;
        }
        if (space == Space::Initial && type == kServerHello) {
            on_server_hello(body, whole, now);
        } else if (space == Space::Handshake && type == kEncryptedExtensions) {
            on_encrypted_extensions(body, whole);
        } else if (space == Space::Handshake && type == kCertificate) {
            on_certificate(body, whole);
        } else if (space == Space::Handshake && type == kCertificateVerify) {
            on_certificate_verify(body, whole);
        } else if (space == Space::Handshake && type == kFinished) {
            on_finished(body, whole, now);
        } else if (space == Space::Application && type == kNewSessionTicket) {
            on_new_session_ticket(body);
        } else {
            throw Error(Errc::ProtocolViolation, "unexpected handshake message");
        }
    } catch (const Error& e) {
        Errc code = e.code() == Errc::Truncated ? Errc::ProtocolViolation : e.code();
        close(code, e.what(), now);
    }
}

void Connection::on_client_hello(ByteView body, ByteView whole, TimePoint now) {
    ByteReader r(body);
    r.skip(32);
    auto key_share = r.bytes(32);
    uint8_t flags = r.u8();
    auto identity = get_field(r);
    decode_transport_params(get_field(r));

    Bytes psk;
    if (flags & kFlagPsk) {
        auto binder = r.bytes(crypto::kHashLen);
        try {
            if (identity.size() < crypto::kIvLen) throw Error(Errc::TicketRejected, "short identity");
            Bytes iv(identity.begin(), identity.begin() + crypto::kIvLen);
            crypto::Aead aead(ticket_key(server_ctx_->ticket_secret), iv);
            auto plain = aead.open(0, {}, identity.subspan(crypto::kIvLen));
            ByteReader pr(plain);
            auto candidate = pr.bytes(crypto::kHashLen);
            int64_t issued = static_cast<int64_t>(pr.u64());
            auto name = pr.rest();
            int64_t age = cfg_.wall_clock() - issued;
            if (age < 0 || age >= cfg_.ticket_lifetime.count()) throw Error(Errc::TicketRejected, "expired");
            if (as_chars(name) != cfg_.server_name) throw Error(Errc::TicketRejected, "wrong server");
            auto early = crypto::hkdf_extract({}, candidate);
            auto binder_key = crypto::derive_secret(early, "res binder", empty_hash());
            auto expect = finished_mac(binder_key, crypto::sha256(whole.subspan(0, whole.size() - crypto::kHashLen)));
            if (!std::equal(expect.begin(), expect.end(), binder.begin())) {
                throw Error(Errc::TicketRejected, "binder mismatch");
            }
            psk.assign(candidate.begin(), candidate.end());
        } catch (const Error&) {
            psk.clear();
        }
    }
    psk_accepted_ = !psk.empty();
    resumed_ = psk_accepted_;
    early_secret_ = crypto::hkdf_extract({}, psk);
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
    if (psk_accepted_ && (flags & kFlagEarlyData)) {
        early_data_accepted_ = true;
        auto early = crypto::derive_secret(early_secret_, "c e traffic", transcript_hash());
        zero_rtt_ = crypto::Aead::from_secret(early);
        if (keylog_) keylog_("CLIENT_EARLY_TRAFFIC_SECRET", local_cid_, early);
    }

    auto shared = ecdhe_.shared_secret(key_share);
    ByteWriter sh;
    sh.bytes(crypto::random_bytes(32));
    sh.bytes(ecdhe_.public_key);
    sh.u8(psk_accepted_ ? kFlagPsk : 0);
    send_handshake_message(Space::Initial, kServerHello, sh.buf());

    auto derived = crypto::derive_secret(early_secret_, "derived", empty_hash());
    handshake_secret_ = crypto::hkdf_extract(derived, shared);
    client_hs_secret_ = crypto::derive_secret(handshake_secret_, "c hs traffic", transcript_hash());
    server_hs_secret_ = crypto::derive_secret(handshake_secret_, "s hs traffic", transcript_hash());
    install_keys(Space::Handshake, server_hs_secret_, client_hs_secret_, HandshakePhase::KeyAgreement);

    ByteWriter ee;
    ee.u8(early_data_accepted_ ? kFlagEarlyData : 0);
    put_field(ee, encode_transport_params());
    send_handshake_message(Space::Handshake, kEncryptedExtensions, ee.buf());
    if (!psk_accepted_) {
        ByteWriter cert;
        put_field(cert, server_ctx_->credentials.certificate_der);
        send_handshake_message(Space::Handshake, kCertificate, cert.buf());
        ByteWriter signed_content;
        signed_content.bytes(as_bytes(kVerifyContext));
        signed_content.u8(0);
        signed_content.bytes(transcript_hash());
        ByteWriter cv;
        put_field(cv, server_ctx_->credentials.sign(signed_content.buf()));
        send_handshake_message(Space::Handshake, kCertificateVerify, cv.buf());
    }
    send_handshake_message(Space::Handshake, kFinished, finished_mac(server_hs_secret_, transcript_hash()));

    auto derived2 = crypto::derive_secret(handshake_secret_, "derived", empty_hash());
    master_secret_ = crypto::hkdf_extract(derived2, {});
    client_ap_secret_ = crypto::derive_secret(master_secret_, "c ap traffic", transcript_hash());
    server_ap_secret_ = crypto::derive_secret(master_secret_, "s ap traffic", transcript_hash());
    auto& app = spaces_[idx(Space::Application)];
    app.seal = crypto::Aead::from_secret(server_ap_secret_);
    app.open = crypto::Aead::from_secret(client_ap_secret_);
    phase_keys_[static_cast<size_t>(HandshakePhase::DataExchange)] = std::make_pair(*app.seal, *app.open);
    if (keylog_) {
        keylog_("CLIENT_TRAFFIC_SECRET_0", local_cid_, client_ap_secret_);
        keylog_("SERVER_TRAFFIC_SECRET_0", local_cid_, server_ap_secret_);
    }
    (void)now;
}

void Connection::on_server_hello(ByteView body, ByteView whole, TimePoint now) {
    if (!handshake_secret_.empty()) throw Error(Errc::ProtocolViolation, "duplicate ServerHello");
    ByteReader r(body);
    r.skip(32);
    auto key_share = r.bytes(32);
    uint8_t flags = r.u8();
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
    psk_accepted_ = offered_psk_ && (flags & kFlagPsk);
    resumed_ = psk_accepted_;
    if (!psk_accepted_) {
        early_secret_ = crypto::hkdf_extract({}, {});
        if (early_data_offered_) reject_zero_rtt();
    }
    auto shared = ecdhe_.shared_secret(key_share);
    auto derived = crypto::derive_secret(early_secret_, "derived", empty_hash());
    handshake_secret_ = crypto::hkdf_extract(derived, shared);
    client_hs_secret_ = crypto::derive_secret(handshake_secret_, "c hs traffic", transcript_hash());
    server_hs_secret_ = crypto::derive_secret(handshake_secret_, "s hs traffic", transcript_hash());
    install_keys(Space::Handshake, client_hs_secret_, server_hs_secret_, HandshakePhase::KeyAgreement);
    (void)now;
}

void Connection::on_encrypted_extensions(ByteView body, ByteView whole) {
    ByteReader r(body);
    uint8_t flags = r.u8();
    decode_transport_params(get_field(r));
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
    early_data_accepted_ = early_data_offered_ && psk_accepted_ && (flags & kFlagEarlyData);
    if (early_data_offered_ && !early_data_accepted_ && zero_rtt_) reject_zero_rtt();
}

void Connection::on_certificate(ByteView body, ByteView whole) {
    if (psk_accepted_) throw Error(Errc::ProtocolViolation, "certificate on resumed handshake");
    ByteReader r(body);
    auto der = get_field(r);
    peer_certificate_.assign(der.begin(), der.end());
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
}

void Connection::on_certificate_verify(ByteView body, ByteView whole) {
    if (peer_certificate_.empty()) throw Error(Errc::ProtocolViolation, "CertificateVerify without certificate");
    ByteReader r(body);
    auto sig = get_field(r);
    ByteWriter signed_content;
    signed_content.bytes(as_bytes(kVerifyContext));
    signed_content.u8(0);
    signed_content.bytes(transcript_hash());
    if (!crypto::verify_with_certificate(peer_certificate_, signed_content.buf(), sig)) {
        throw Error(Errc::AuthenticationFailed, "server signature does not verify");
    }
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
    peer_certificate_.push_back(0);  // marks the signature as checked
}

void Connection::on_finished(ByteView body, ByteView whole, TimePoint now) {
    if (role_ == Role::Client) {
        if (!psk_accepted_ && (peer_certificate_.empty() || peer_certificate_.back() != 0)) {
            throw Error(Errc::AuthenticationFailed, "server not authenticated");
        }
        auto expect = finished_mac(server_hs_secret_, transcript_hash());
        if (body.size() != expect.size() || !std::equal(expect.begin(), expect.end(), body.begin())) {
            throw Error(Errc::AuthenticationFailed, "server Finished mismatch");
        }
        transcript_.insert(transcript_.end(), whole.begin(), whole.end());
        auto derived = crypto::derive_secret(handshake_secret_, "derived", empty_hash());
        master_secret_ = crypto::hkdf_extract(derived, {});
        client_ap_secret_ = crypto::derive_secret(master_secret_, "c ap traffic", transcript_hash());
        server_ap_secret_ = crypto::derive_secret(master_secret_, "s ap traffic", transcript_hash());
        send_handshake_message(Space::Handshake, kFinished, finished_mac(client_hs_secret_, transcript_hash()));
        resumption_master_ = crypto::derive_secret(master_secret_, "res master", transcript_hash());
        install_keys(Space::Application, client_ap_secret_, server_ap_secret_, HandshakePhase::DataExchange);
        if (keylog_) {
            keylog_("CLIENT_TRAFFIC_SECRET_0", remote_cid_, client_ap_secret_);
            keylog_("SERVER_TRAFFIC_SECRET_0", remote_cid_, server_ap_secret_);
        }
        complete_handshake(now);
        return;
    }
    auto expect = finished_mac(client_hs_secret_, transcript_hash());
    if (body.size() != expect.size() || !std::equal(expect.begin(), expect.end(), body.begin())) {
        throw Error(Errc::AuthenticationFailed, "client Finished mismatch");
    }
    transcript_.insert(transcript_.end(), whole.begin(), whole.end());
    resumption_master_ = crypto::derive_secret(master_secret_, "res master", transcript_hash());
    complete_handshake(now);
    handshake_confirmed_ = true;
    handshake_done_pending_ = true;
    discard_space(Space::Handshake);

    auto nonce = crypto::random_bytes(8);
    auto psk = crypto::hkdf_expand_label(resumption_master_, "resumption", nonce, crypto::kHashLen);
    ByteWriter plain;
    plain.bytes(psk);
    plain.u64(static_cast<uint64_t>(cfg_.wall_clock()));
    plain.bytes(as_bytes(cfg_.server_name));
    auto iv = crypto::random_bytes(crypto::kIvLen);
    crypto::Aead aead(ticket_key(server_ctx_->ticket_secret), iv);
    Bytes identity = iv;
    auto sealed = aead.seal(0, {}, plain.buf());
    identity.insert(identity.end(), sealed.begin(), sealed.end());
    ByteWriter nst;
    nst.u32(static_cast<uint32_t>(cfg_.ticket_lifetime.count()));
    put_field(nst, nonce);
    put_field(nst, identity);
    put_field(nst, encode_transport_params());
    send_handshake_message(Space::Application, kNewSessionTicket, nst.buf(), false);
}

void Connection::on_new_session_ticket(ByteView body) {
    ByteReader r(body);
    r.u32();
    auto nonce = get_field(r);
    auto identity = get_field(r);
    auto params = get_field(r);
    ResumptionSecret rs;
    rs.identity.assign(identity.begin(), identity.end());
    rs.psk = crypto::hkdf_expand_label(resumption_master_, "resumption", nonce, crypto::kHashLen);
    SessionTicket t;
    t.server_name = cfg_.server_name;
    t.ticket_bytes = rs.encode();
    t.transport_params.assign(params.begin(), params.end());
    t.issued_at = cfg_.wall_clock();
    emit(event::NewTicket{std::move(t)});
}

void Connection::complete_handshake(TimePoint now) {
    handshake_complete_ = true;
    state_ = State::Established;
    advance_phase(HandshakePhase::DataExchange);
    path_.validated = true;
    stats_.handshake_completed_at = now;
    if (role_ == Role::Client) {
        // Initial keys are dropped once the client starts sending Handshake packets.
        discard_space(Space::Initial);
        zero_rtt_.reset();
    }
    emit(event::HandshakeCompleted{resumed_, early_data_accepted_});
}

void Connection::discard_space(Space space) {
    auto& ps = spaces_[idx(space)];
    if (ps.discarded) return;
    for (auto& [pn, p] : ps.sent) {
        if (p.in_flight) bytes_in_flight_ -= p.size;
    }
    ps.sent.clear();
    ps.eliciting_outstanding = 0;
    ps.loss_time.reset();
    ps.last_ack_eliciting_sent.reset();
    ps.ack_needed = false;
    ps.ack_deadline.reset();
    ps.probes = 0;
    ps.seal.reset();
    ps.open.reset();
    ps.discarded = true;
    pto_count_ = 0;
}

void Connection::reject_zero_rtt() {
    auto& app = spaces_[idx(Space::Application)];
    for (auto it = app.sent.begin(); it != app.sent.end();) {
        if (!it->second.zero_rtt) {
            ++it;
            continue;
        }
        auto& p = it->second;
        if (p.in_flight) bytes_in_flight_ -= p.size;
        if (p.ack_eliciting) --app.eliciting_outstanding;
        for (auto& f : p.frames) {
            if (auto* s = std::get_if<StreamRange>(&f)) {
                auto& sb = streams_.at(s->id).send;
                sb.on_lost(s->offset, s->length);
                if (s->fin && !sb.fin_acked) sb.fin_lost = true;
            }
        }
        it = app.sent.erase(it);
    }
    zero_rtt_.reset();
    early_data_accepted_ = false;
    emit(event::TicketRejected{});
}

Bytes Connection::crypt_message(Direction dir, HandshakePhase phase, ByteView data) {
    auto& keys = phase_keys_[static_cast<size_t>(phase)];
    if (!keys) throw Error(Errc::KeysUnavailable, std::string("no keys for phase ") + std::string(to_string(phase)));
    if (dir == Direction::Encrypt) {
        uint64_t seq = crypt_seq_++;
        ByteWriter w;
        w.u64(seq);
        w.bytes(keys->first.seal(seq, {}, data));
        return w.take();
    }
    if (data.size() < 8 + crypto::kTagLen) throw Error(Errc::AuthenticationFailed, "message too short");
    ByteReader r(data);
    uint64_t seq = r.u64();
    return keys->second.open(seq, {}, r.rest());
}


// ---------------------------------------------------------------------------
// Receive path

void Connection::receive(ByteView datagram, SocketAddr from, SocketAddr to, TimePoint now) {
    if (state_ == State::Closed) return;
    stats_.datagrams_received++;
    stats_.bytes_received += datagram.size();
    amp_received_ += datagram.size();
    (void)to;

    auto run = [&](ByteView data, SocketAddr src, bool from_stash) {
        bool non_probing_new = false;
        size_t short_len = role_ == Role::Server ? local_cid_.size() : 0;
        while (!data.empty()) {
            RawPacket pkt;
            try {
                pkt = parse_packet(data, short_len);
            } catch (const Error&) {
                stats_.undecryptable++;
                return non_probing_new;
            }
            bool probing_only = true;
            auto before = spaces_[idx(Space::Application)].largest_received;
            auto space = space_of(pkt.header.type);
            bool keys_ready = pkt.header.type == PacketType::ZeroRtt ? zero_rtt_.has_value()
                                                                     : spaces_[idx(space)].open.has_value();
            if (!keys_ready) {
                bool later = !spaces_[idx(space)].discarded && pkt.header.type != PacketType::ZeroRtt;
                if (later && !from_stash && undecryptable_.size() < kMaxUndecryptable) {
                    undecryptable_.emplace_back(Bytes(data.begin(), data.begin() + pkt.total_len), src);
                } else {
                    stats_.undecryptable++;
                }
            } else {
                process_packet(pkt, src, now, probing_only);
                auto after = spaces_[idx(Space::Application)].largest_received;
                if (space == Space::Application && !probing_only && after != before) non_probing_new = true;
            }
            data = data.subspan(pkt.total_len);
            if (state_ == State::Closed) break;
        }
        return non_probing_new;
    };

    bool non_probing_new = run(datagram, from, false);

    // Packets that arrived ahead of their keys get one more try.
    while (!undecryptable_.empty()) {
        auto stash = std::move(undecryptable_);
        undecryptable_.clear();
        size_t before = stash.size();
        std::vector<std::pair<Bytes, SocketAddr>> still;
        for (auto& [bytes, src] : stash) {
            size_t short_len = role_ == Role::Server ? local_cid_.size() : 0;
            RawPacket pkt;
            try {
                pkt = parse_packet(bytes, short_len);
            } catch (const Error&) {
                continue;
            }
            auto space = space_of(pkt.header.type);
            if (spaces_[idx(space)].open) {
                non_probing_new |= run(bytes, src, true);
            } else if (!spaces_[idx(space)].discarded) {
                still.emplace_back(std::move(bytes), src);
            }
        }
        undecryptable_ = std::move(still);
        if (undecryptable_.size() == before) break;
    }

    if (role_ == Role::Server && handshake_complete_ && non_probing_new && from != path_.remote) {
        path_.remote = from;
        path_.validated = false;
        std::array<uint8_t, 8> c{};
        auto r = crypto::random_bytes(8);
        std::copy(r.begin(), r.end(), c.begin());
        challenge_ = c;
        challenge_pending_send_ = true;
        challenge_deadline_ = now + std::max(3 * smoothed_rtt_, cfg_.path_validation_floor);
    }
}

void Connection::process_packet(const RawPacket& pkt, SocketAddr from, TimePoint now, bool& probing_only) {
    auto space = space_of(pkt.header.type);
    auto& ps = spaces_[idx(space)];
    uint64_t pn = decode_packet_number(ps.largest_received.value_or(0), pkt.header.truncated_pn, pkt.header.pn_len);
    if (!ps.largest_received) pn = pkt.header.truncated_pn;
    if (boost::icl::contains(ps.received, pn) ||
        (!ps.received.empty() && pn < icl::first(*ps.received.begin()))) {
        stats_.duplicates_dropped++;
        return;
    }
    const crypto::Aead& aead = pkt.header.type == PacketType::ZeroRtt ? *zero_rtt_ : *ps.open;
    Bytes plain;
    try {
        plain = aead.open(pn, pkt.header_bytes, pkt.ciphertext);
    } catch (const Error&) {
        stats_.auth_failures++;
        return;
    }
    std::vector<Frame> frames;
    try {
        frames = parse_frames(plain);
    } catch (const Error& e) {
        close(Errc::ProtocolViolation, e.what(), now);
        return;
    }
    stats_.packets_received++;
    last_activity_ = now;

    if (role_ == Role::Client && space == Space::Initial && !pkt.header.scid.empty()) {
        remote_cid_ = pkt.header.scid;
    }
    if (role_ == Role::Server && space == Space::Handshake && !address_validated_) {
        address_validated_ = true;
        discard_space(Space::Initial);
    }

    ps.received += pn;
    while (boost::icl::interval_count(ps.received) > kMaxReceivedIntervals) ps.received.erase(*ps.received.begin());
    if (!ps.largest_received || pn > *ps.largest_received) {
        ps.largest_received = pn;
        ps.largest_received_time = now;
    }
    bool eliciting = std::any_of(frames.begin(), frames.end(), [](const Frame& f) { return is_ack_eliciting(f); });
    probing_only = std::all_of(frames.begin(), frames.end(), [](const Frame& f) {
        return std::holds_alternative<frame::PathChallenge>(f) || std::holds_alternative<frame::PathResponse>(f) ||
               std::holds_alternative<frame::Padding>(f);
    });
    if (eliciting) {
        ps.ack_needed = true;
        ps.unacked_eliciting++;
        if (!ps.ack_deadline) ps.ack_deadline = now + cfg_.max_ack_delay;
    }
    handle_frames(space, frames, from, now);
}

void Connection::handle_frames(Space space, const std::vector<Frame>& frames, SocketAddr from, TimePoint now) {
    for (const auto& f : frames) {
        if (state_ == State::Closed || state_ == State::Draining) return;
        if (auto* a = std::get_if<frame::Ack>(&f)) {
            on_ack(space, *a, now);
        } else if (auto* c = std::get_if<frame::Crypto>(&f)) {
            auto& ps = spaces_[idx(space)];
            if (ps.crypto_recv.insert(c->offset, c->data)) on_crypto_data(space, now);
        } else if (auto* s = std::get_if<frame::Stream>(&f)) {
            on_stream_frame(*s);
        } else if (auto* pc = std::get_if<frame::PathChallenge>(&f)) {
            responses_.emplace_back(pc->data, from);
        } else if (auto* pr = std::get_if<frame::PathResponse>(&f)) {
            if (challenge_ && *challenge_ == pr->data) {
                challenge_.reset();
                challenge_deadline_.reset();
                challenge_pending_send_ = false;
                path_.validated = true;
                emit(event::PathValidated{path_});
            }
        } else if (auto* cc = std::get_if<frame::ConnectionClose>(&f)) {
            state_ = State::Draining;
            close_deadline_ = now + 3 * pto_base(Space::Application);
            close_reason_ = wire_to_errc(cc->error_code);
            emit(event::Closed{close_reason_, cc->reason});
            return;
        } else if (std::holds_alternative<frame::HandshakeDone>(f)) {
            if (role_ == Role::Server) {
                close(Errc::ProtocolViolation, "HANDSHAKE_DONE from client", now);
                return;
            }
            handshake_confirmed_ = true;
            discard_space(Space::Handshake);
        }
    }
}

void Connection::on_stream_frame(const frame::Stream& f) {
    bool peer_initiated = (f.id & 1) != (role_ == Role::Client ? 0u : 1u);
    auto it = streams_.find(f.id);
    if (it == streams_.end()) {
        if (!peer_initiated) return;
        it = streams_.emplace(f.id, Stream{}).first;
        emit(event::StreamOpened{f.id});
    }
    auto& rb = it->second.recv;
    if (f.fin) rb.fin_at = f.offset + f.data.size();
    bool had = !rb.ready.empty();
    if (rb.insert(f.offset, f.data) && !had) emit(event::StreamReadable{f.id});
    if (f.fin && f.data.empty() && rb.contiguous == *rb.fin_at) emit(event::StreamReadable{f.id});
}

void Connection::on_ack(Space space, const frame::Ack& ack, TimePoint now) {
    auto& ps = spaces_[idx(space)];
    if (ack.largest >= ps.next_pn) return;
    std::vector<uint64_t> newly;
    for (auto& [lo, hi] : ack.ranges) {
        for (auto it = ps.sent.lower_bound(lo); it != ps.sent.end() && it->first <= hi; ++it) newly.push_back(it->first);
    }
    if (newly.empty()) return;
    if (!ps.largest_acked || *ps.largest_acked < ack.largest) ps.largest_acked = ack.largest;

    auto largest_it = ps.sent.find(ack.largest);
    if (largest_it != ps.sent.end() && largest_it->second.ack_eliciting) {
        Duration ack_delay = std::chrono::microseconds(ack.delay << 3);
        update_rtt(now - largest_it->second.time_sent, ack_delay, space);
    }
    for (uint64_t pn : newly) {
        auto it = ps.sent.find(pn);
        on_packet_acked(space, it->second);
        ps.sent.erase(it);
    }
    detect_lost(space, now);
    pto_count_ = 0;
    ps.probes = 0;
}

void Connection::on_packet_acked(Space space, SentPacket& p) {
    auto& ps = spaces_[idx(space)];
    if (p.ack_eliciting) --ps.eliciting_outstanding;
    if (p.in_flight) {
        bytes_in_flight_ -= p.size;
        bool in_recovery = recovery_start_ && p.time_sent <= *recovery_start_;
        if (!in_recovery) {
            if (cwnd_ < ssthresh_) {
                cwnd_ += p.size;
            } else {
                cwnd_ += cfg_.max_udp_payload * p.size / cwnd_;
            }
        }
    }
    for (auto& f : p.frames) {
        if (auto* s = std::get_if<StreamRange>(&f)) {
            auto it = streams_.find(s->id);
            if (it == streams_.end()) continue;
            it->second.send.on_acked(s->offset, s->length);
            if (s->fin) it->second.send.fin_acked = true;
        } else if (auto* c = std::get_if<CryptoRange>(&f)) {
            ps.crypto_send.on_acked(c->offset, c->length);
        }
    }
}

void Connection::update_rtt(Duration latest, Duration ack_delay, Space space) {
    latest_rtt_ = latest;
    min_rtt_ = std::min(min_rtt_, latest);
    if (!have_rtt_) {
        have_rtt_ = true;
        smoothed_rtt_ = latest;
        rttvar_ = latest / 2;
        return;
    }
    if (space == Space::Application && handshake_confirmed_) ack_delay = std::min(ack_delay, peer_max_ack_delay_);
    Duration adjusted = latest;
    if (latest >= min_rtt_ + ack_delay) adjusted = latest - ack_delay;
    auto diff = smoothed_rtt_ > adjusted ? smoothed_rtt_ - adjusted : adjusted - smoothed_rtt_;
    rttvar_ = (3 * rttvar_ + diff) / 4;
    smoothed_rtt_ = (7 * smoothed_rtt_ + adjusted) / 8;
}

void Connection::detect_lost(Space space, TimePoint now) {
    auto& ps = spaces_[idx(space)];
    if (!ps.largest_acked) return;
    Duration loss_delay = std::max(9 * std::max(latest_rtt_, smoothed_rtt_) / 8, kGranularity);
    TimePoint lost_send_time = now - loss_delay;
    ps.loss_time.reset();
    std::optional<TimePoint> latest_lost;
    for (auto it = ps.sent.begin(); it != ps.sent.end() && it->first < *ps.largest_acked;) {
        auto& p = it->second;
        if (p.time_sent <= lost_send_time || *ps.largest_acked >= it->first + 3) {
            if (p.in_flight && (!latest_lost || p.time_sent > *latest_lost)) latest_lost = p.time_sent;
            on_packet_lost(space, it->first, p);
            it = ps.sent.erase(it);
        } else {
            auto t = p.time_sent + loss_delay;
            if (!ps.loss_time || t < *ps.loss_time) ps.loss_time = t;
            ++it;
        }
    }
    if (latest_lost) on_congestion_event(*latest_lost, now);
}

void Connection::on_packet_lost(Space space, uint64_t pn, SentPacket& p) {
    (void)pn;
    auto& ps = spaces_[idx(space)];
    stats_.packets_lost++;
    if (p.in_flight) bytes_in_flight_ -= p.size;
    if (p.ack_eliciting) --ps.eliciting_outstanding;
    for (auto& f : p.frames) {
        if (auto* s = std::get_if<StreamRange>(&f)) {
            auto it = streams_.find(s->id);
            if (it == streams_.end()) continue;
            it->second.send.on_lost(s->offset, s->length);
            if (s->fin && !it->second.send.fin_acked) it->second.send.fin_lost = true;
        } else if (auto* c = std::get_if<CryptoRange>(&f)) {
            ps.crypto_send.on_lost(c->offset, c->length);
        } else if (std::holds_alternative<HandshakeDoneSent>(f)) {
            handshake_done_pending_ = true;
        } else if (std::holds_alternative<ChallengeSent>(f)) {
            if (challenge_) challenge_pending_send_ = true;
        }
    }
}

void Connection::on_congestion_event(TimePoint sent_time, TimePoint now) {
    if (recovery_start_ && sent_time <= *recovery_start_) return;
    recovery_start_ = now;
    ssthresh_ = std::max(cwnd_ / 2, 2 * cfg_.max_udp_payload);
    cwnd_ = ssthresh_;
}

Duration Connection::pto_base(Space space) const {
    Duration d = smoothed_rtt_ + std::max(4 * rttvar_, kGranularity);
    if (space == Space::Application) d += peer_max_ack_delay_;
    return d;
}

std::optional<std::pair<TimePoint, Space>> Connection::loss_timer() const {
    std::optional<std::pair<TimePoint, Space>> best;
    for (size_t i = 0; i < spaces_.size(); ++i) {
        auto& ps = spaces_[i];
        if (ps.loss_time && (!best || *ps.loss_time < best->first)) best = {{*ps.loss_time, static_cast<Space>(i)}};
    }
    return best;
}

std::optional<std::pair<TimePoint, Space>> Connection::pto_timer() const {
    std::optional<std::pair<TimePoint, Space>> best;
    for (size_t i = 0; i < spaces_.size(); ++i) {
        auto& ps = spaces_[i];
        auto space = static_cast<Space>(i);
        if (ps.discarded || ps.eliciting_outstanding == 0 || !ps.last_ack_eliciting_sent) continue;
        if (space == Space::Application && !handshake_complete_ && role_ == Role::Server) continue;
        auto t = *ps.last_ack_eliciting_sent + pto_base(space) * (1 << std::min(pto_count_, 16));
        if (!best || t < best->first) best = {{t, space}};
    }
    return best;
}

void Connection::on_pto(Space space, TimePoint now) {
    (void)now;
    pto_count_++;
    auto& ps = spaces_[idx(space)];
    ps.probes = 2;
    // Queue the oldest outstanding data again so the probe carries it.
    for (auto& [pn, p] : ps.sent) {
        if (!p.ack_eliciting) continue;
        for (auto& f : p.frames) {
            if (auto* s = std::get_if<StreamRange>(&f)) {
                auto it = streams_.find(s->id);
                if (it == streams_.end()) continue;
                it->second.send.on_lost(s->offset, s->length);
                if (s->fin && !it->second.send.fin_acked) it->second.send.fin_lost = true;
            } else if (auto* c = std::get_if<CryptoRange>(&f)) {
                ps.crypto_send.on_lost(c->offset, c->length);
            } else if (std::holds_alternative<HandshakeDoneSent>(f)) {
                handshake_done_pending_ = true;
            }
        }
        break;
    }
}

// ---------------------------------------------------------------------------
// Send path

bool Connection::space_ready(Space s) const {
    auto& ps = spaces_[idx(s)];
    if (ps.discarded) return false;
    if (ps.seal) return true;
    return s == Space::Application && role_ == Role::Client && zero_rtt_.has_value();
}

bool Connection::ack_due(const PacketSpace& ps, TimePoint now) const {
    if (!ps.ack_needed) return false;
    if (&ps != &spaces_[idx(Space::Application)]) return true;
    return ps.unacked_eliciting >= cfg_.ack_eliciting_threshold || (ps.ack_deadline && now >= *ps.ack_deadline);
}

void Connection::write_ack_frame(PacketSpace& ps, ByteWriter& w, TimePoint now) {
    frame::Ack a;
    a.largest = *ps.largest_received;
    auto delay = std::chrono::duration_cast<std::chrono::microseconds>(now - ps.largest_received_time).count();
    a.delay = static_cast<uint64_t>(std::max<int64_t>(delay, 0)) >> 3;
    for (auto it = ps.received.rbegin(); it != ps.received.rend() && a.ranges.size() < kMaxAckRanges; ++it) {
        a.ranges.emplace_back(icl::first(*it), icl::last(*it));
    }
    write_ack(w, a);
    ps.ack_needed = false;
    ps.unacked_eliciting = 0;
    ps.ack_deadline.reset();
}

size_t Connection::fill_stream_frames(ByteWriter& w, size_t room, SentPacket& sp, bool& any_last) {
    struct Plan {
        uint64_t id;
        uint64_t offset;
        uint64_t length;
        bool fin;
    };
    std::vector<Plan> plan;
    std::vector<uint64_t> ids;
    for (auto& [id, st] : streams_) {
        if (st.send.has_pending()) ids.push_back(id);
    }
    if (ids.empty()) return 0;
    auto start = std::upper_bound(ids.begin(), ids.end(), stream_cursor_);
    std::rotate(ids.begin(), start, ids.end());

    size_t used = 0;
    for (uint64_t id : ids) {
        auto& sb = streams_[id].send;
        while (sb.has_pending()) {
            uint64_t off, len;
            bool retx = !sb.retransmit.empty();
            if (retx) {
                auto first = sb.retransmit.begin();
                off = icl::first(*first);
                len = icl::last(*first) + 1 - off;
            } else if (sb.sent < sb.written) {
                off = sb.sent;
                len = sb.written - sb.sent;
            } else {
                off = sb.written;
                len = 0;
            }
            size_t hdr = stream_header_size(id, off, len, false);
            if (room <= used + hdr) break;
            uint64_t take = std::min<uint64_t>(len, room - used - hdr);
            if (take == 0 && len > 0) break;
            bool fin = sb.fin && off + take == sb.written;
            plan.push_back({id, off, take, fin});
            if (retx) {
                sb.retransmit -= boost::icl::interval<uint64_t>::right_open(off, off + take);
                stats_.stream_bytes_retransmitted += take;
            } else if (take > 0) {
                sb.sent += take;
                buffered_unsent_ -= take;
            }
            if (fin) {
                sb.fin_sent = true;
                sb.fin_lost = false;
            }
            used += hdr + take;
            stream_cursor_ = id;
            if (room - used < 16) break;
        }
        if (room <= used + 16) break;
    }
    size_t written = 0;
    for (size_t i = 0; i < plan.size(); ++i) {
        auto& pl = plan[i];
        bool last = i + 1 == plan.size();
        size_t before = w.size();
        write_stream(w, pl.id, pl.offset, streams_[pl.id].send.view(pl.offset, pl.length), pl.fin, last);
        written += w.size() - before;
        sp.frames.push_back(StreamRange{pl.id, pl.offset, pl.length, pl.fin});
        stats_.stream_frames_sent++;
        stats_.stream_bytes_sent += pl.length;
    }
    if (!plan.empty()) {
        sp.ack_eliciting = true;
        any_last = true;
    }
    return written;
}

std::optional<Datagram> Connection::poll_transmit(TimePoint now) {
    if (state_ == State::Closed || state_ == State::Draining) return std::nullopt;

    size_t budget = cfg_.max_udp_payload;
    if (role_ == Role::Server && !address_validated_) {
        uint64_t limit = 3 * amp_received_;
        if (amp_sent_ >= limit) return std::nullopt;
        budget = std::min<size_t>(budget, limit - amp_sent_);
    }

    struct Pending {
        Space space;
        PacketType type;
        uint64_t pn;
        Bytes plain;
        SentPacket sp;
    };
    std::vector<Pending> out;
    size_t used = 0;
    bool client_initial = false;

    auto header_size = [&](PacketType type, size_t payload) {
        if (type == PacketType::OneRtt) return short_header_size(remote_cid_.size());
        PacketHeader h;
        h.type = type;
        h.dcid = remote_cid_;
        h.scid = local_cid_;
        return long_header_size(h, payload + crypto::kTagLen);
    };

    // A challenge that arrived on another path is answered on that path.
    if (state_ != State::Closing && !responses_.empty() && responses_.front().second != path_.remote &&
        spaces_[idx(Space::Application)].seal) {
        auto [data, to] = responses_.front();
        responses_.pop_front();
        auto& ps = spaces_[idx(Space::Application)];
        Bytes plain;
        ByteWriter w(plain);
        write_path_response(w, data);
        uint64_t pn = ps.next_pn++;
        Datagram d{path_.local, to, {}};
        seal_packet(Space::Application, PacketType::OneRtt, pn, d.data, plain);
        SentPacket sp;
        sp.size = d.data.size();
        sp.ack_eliciting = true;
        record_sent(Space::Application, pn, std::move(sp), now);
        stats_.short_packets_sent++;
        stats_.datagrams_sent++;
        stats_.bytes_sent += d.data.size();
        amp_sent_ += d.data.size();
        return d;
    }

    if (state_ == State::Closing) {
        if (!close_pending_send_) return std::nullopt;
        close_pending_send_ = false;
        for (int i = 2; i >= 0; --i) {
            auto s = static_cast<Space>(i);
            if (!spaces_[i].seal || spaces_[i].discarded) continue;
            Pending p{s, s == Space::Initial     ? PacketType::Initial
                         : s == Space::Handshake ? PacketType::Handshake
                                                 : PacketType::OneRtt,
                      spaces_[i].next_pn++, {}, {}};
            ByteWriter w(p.plain);
            write_connection_close(w, close_frame_);
            out.push_back(std::move(p));
            break;
        }
    } else {
        for (int i = 0; i < 3; ++i) {
            auto space = static_cast<Space>(i);
            if (!space_ready(space)) continue;
            auto& ps = spaces_[i];
            PacketType type = space == Space::Initial     ? PacketType::Initial
                              : space == Space::Handshake ? PacketType::Handshake
                              : ps.seal                   ? PacketType::OneRtt
                                                          : PacketType::ZeroRtt;
            size_t hdr = header_size(type, budget);
            if (budget <= used + hdr + crypto::kTagLen + 8) break;
            size_t room = budget - used - hdr - crypto::kTagLen;

            Pending p{space, type, 0, {}, {}};
            ByteWriter w(p.plain);
            bool probe = ps.probes > 0;
            bool cc_ok = probe || space != Space::Application || bytes_in_flight_ < cwnd_;
            bool one_rtt = type == PacketType::OneRtt;

            bool crypto_pending = ps.crypto_send.has_pending() && type != PacketType::ZeroRtt;
            bool control_pending = one_rtt && ((handshake_done_pending_ && role_ == Role::Server) ||
                                               !responses_.empty() || challenge_pending_send_);
            bool stream_pending = space == Space::Application && cc_ok &&
                                  std::any_of(streams_.begin(), streams_.end(),
                                              [](auto& kv) { return kv.second.send.has_pending(); });
            bool other = crypto_pending || control_pending || stream_pending || probe;

            if (type != PacketType::ZeroRtt && ps.largest_received && (ack_due(ps, now) || (other && ps.ack_needed))) {
                write_ack_frame(ps, w, now);
            }
            if (one_rtt && handshake_done_pending_ && role_ == Role::Server) {
                w.u8(0x1e);
                handshake_done_pending_ = false;
                p.sp.frames.push_back(HandshakeDoneSent{});
                p.sp.ack_eliciting = true;
            }
            while (one_rtt && !responses_.empty() && responses_.front().second == path_.remote &&
                   p.plain.size() + 9 < room) {
                write_path_response(w, responses_.front().first);
                responses_.pop_front();
                p.sp.ack_eliciting = true;
            }
            if (one_rtt && challenge_pending_send_ && challenge_ && p.plain.size() + 9 < room) {
                write_path_challenge(w, *challenge_);
                challenge_pending_send_ = false;
                p.sp.frames.push_back(ChallengeSent{});
                p.sp.ack_eliciting = true;
            }
            if (crypto_pending) {
                auto& cs = ps.crypto_send;
                while (cs.has_pending() && p.plain.size() + 8 < room) {
                    uint64_t off, len;
                    if (!cs.retransmit.empty()) {
                        auto first = cs.retransmit.begin();
                        off = icl::first(*first);
                        len = icl::last(*first) + 1 - off;
                    } else {
                        off = cs.sent;
                        len = cs.written - cs.sent;
                    }
                    size_t h = crypto_header_size(off, len);
                    uint64_t take = std::min<uint64_t>(len, room - p.plain.size() - h);
                    write_crypto(w, off, cs.view(off, take));
                    if (!cs.retransmit.empty() && icl::first(*cs.retransmit.begin()) == off) {
                        cs.retransmit -= boost::icl::interval<uint64_t>::right_open(off, off + take);
                    } else {
                        cs.sent += take;
                    }
                    p.sp.frames.push_back(CryptoRange{off, take});
                    p.sp.ack_eliciting = true;
                }
            }
            if (stream_pending && p.plain.size() + 8 < room) {
                bool last = false;
                fill_stream_frames(w, room - p.plain.size(), p.sp, last);
                if (type == PacketType::ZeroRtt) p.sp.zero_rtt = true;
            }
            if (probe && !p.sp.ack_eliciting) {
                w.u8(0x01);
                p.sp.ack_eliciting = true;
            }
            if (p.plain.empty()) continue;
            if (probe && p.sp.ack_eliciting) ps.probes--;
            if (space == Space::Initial && role_ == Role::Client) client_initial = true;
            p.pn = ps.next_pn++;
            used += header_size(type, p.plain.size()) + p.plain.size() + crypto::kTagLen;
            out.push_back(std::move(p));
            // A short header packet has no length field, so nothing may follow it.
            if (type == PacketType::OneRtt) break;
        }
    }
    if (out.empty()) return std::nullopt;

    if (client_initial && used < kMinInitialDatagram) {
        // PADDING goes in front: the last STREAM frame runs to the end of its packet.
        auto& last = out.back();
        size_t before = header_size(last.type, last.plain.size());
        size_t pad = kMinInitialDatagram - used;
        size_t grow = header_size(last.type, last.plain.size() + pad) - before;
        pad = pad > grow ? pad - grow : 0;
        last.plain.insert(last.plain.begin(), pad, 0);
    }

    Datagram d{path_.local, path_.remote, {}};
    for (auto& p : out) {
        size_t start = d.data.size();
        seal_packet(p.space, p.type, p.pn, d.data, p.plain);
        p.sp.size = d.data.size() - start;
        if (p.type == PacketType::OneRtt) stats_.short_packets_sent++;
        if (p.type == PacketType::ZeroRtt) stats_.zero_rtt_packets_sent++;
        if (!p.sp.frames.empty() && !stats_.first_stream_data_sent_at &&
            std::any_of(p.sp.frames.begin(), p.sp.frames.end(),
                        [](auto& f) { return std::holds_alternative<StreamRange>(f); })) {
            stats_.first_stream_data_sent_at = now;
        }
        record_sent(p.space, p.pn, std::move(p.sp), now);
    }
    if (state_ == State::Closing && !close_deadline_) close_deadline_ = now + 3 * pto_base(Space::Application);
    stats_.datagrams_sent++;
    stats_.bytes_sent += d.data.size();
    amp_sent_ += d.data.size();
    return d;
}

void Connection::seal_packet(Space space, PacketType type, uint64_t pn, Bytes& dgram, ByteView plain) {
    const crypto::Aead& aead = type == PacketType::ZeroRtt ? *zero_rtt_ : *spaces_[idx(space)].seal;
    size_t start = dgram.size();
    ByteWriter w(dgram);
    if (type == PacketType::OneRtt) {
        write_short_header(w, remote_cid_, pn);
    } else {
        PacketHeader h;
        h.type = type;
        h.dcid = remote_cid_;
        h.scid = local_cid_;
        write_long_header(w, h, pn, plain.size() + crypto::kTagLen);
    }
    Bytes header(dgram.begin() + static_cast<ptrdiff_t>(start), dgram.end());
    w.bytes(aead.seal(pn, header, plain));
}

void Connection::record_sent(Space space, uint64_t pn, SentPacket sp, TimePoint now) {
    auto& ps = spaces_[idx(space)];
    stats_.packets_sent++;
    sp.time_sent = now;
    if (sp.ack_eliciting) {
        sp.in_flight = true;
        bytes_in_flight_ += sp.size;
        ps.last_ack_eliciting_sent = now;
        ps.eliciting_outstanding++;
        last_activity_ = std::max(last_activity_, now);
        ps.sent.emplace(pn, std::move(sp));
    } else if (!sp.frames.empty()) {
        ps.sent.emplace(pn, std::move(sp));
    }
}

// ---------------------------------------------------------------------------
// Timers and lifecycle

std::optional<TimePoint> Connection::next_timeout() const {
    if (state_ == State::Closed) return std::nullopt;
    if (state_ == State::Closing || state_ == State::Draining) return close_deadline_;
    std::optional<TimePoint> t = last_activity_ + cfg_.idle_timeout;
    auto consider = [&](std::optional<TimePoint> c) {
        if (c && (!t || *c < *t)) t = c;
    };
    if (!handshake_complete_) consider(created_at_ + cfg_.handshake_timeout);
    consider(challenge_deadline_);
    if (auto lt = loss_timer()) {
        consider(lt->first);
    } else if (auto pt = pto_timer()) {
        consider(pt->first);
    }
    for (auto& ps : spaces_) {
        if (ps.ack_needed && ps.ack_deadline && !ps.discarded) consider(ps.ack_deadline);
    }
    return t;
}

void Connection::handle_timeout(TimePoint now) {
    if (state_ == State::Closed) return;
    if (state_ == State::Closing || state_ == State::Draining) {
        if (close_deadline_ && now >= *close_deadline_) enter_closed(close_reason_, "");
        return;
    }
    if (now >= last_activity_ + cfg_.idle_timeout) {
        emit(event::Closed{Errc::Closed, "idle timeout"});
        enter_closed(Errc::Closed, "idle timeout");
        return;
    }
    if (!handshake_complete_ && now >= created_at_ + cfg_.handshake_timeout) {
        emit(event::Closed{Errc::HandshakeTimeout, "handshake timed out"});
        enter_closed(Errc::HandshakeTimeout, "handshake timed out");
        return;
    }
    if (challenge_deadline_ && now >= *challenge_deadline_) {
        auto failed = path_;
        challenge_.reset();
        challenge_deadline_.reset();
        challenge_pending_send_ = false;
        emit(event::PathValidationFailed{failed});
    }
    if (auto lt = loss_timer(); lt && now >= lt->first) {
        detect_lost(lt->second, now);
    } else if (auto pt = pto_timer(); pt && now >= pt->first) {
        on_pto(pt->second, now);
    }
}

void Connection::close(Errc reason, const std::string& detail, TimePoint now) {
    if (state_ == State::Closing || state_ == State::Draining || state_ == State::Closed) return;
    state_ = State::Closing;
    close_reason_ = reason;
    close_frame_ = {errc_to_wire(reason), 0, detail.substr(0, 64)};
    close_pending_send_ = true;
    close_deadline_ = now + 3 * pto_base(Space::Application);
    emit(event::Closed{reason, detail});
}

void Connection::enter_closed(Errc reason, const std::string& detail) {
    (void)detail;
    state_ = State::Closed;
    close_reason_ = reason;
}

std::optional<Event> Connection::poll_event() {
    if (events_.empty()) return std::nullopt;
    auto e = std::move(events_.front());
    events_.pop_front();
    return e;
}

TimePoint Connection::schedule_retransmit() const {
    if (state_ == State::Closed) throw Error(Errc::Closed, "connection closed");
    if (auto lt = loss_timer()) return lt->first;
    if (auto pt = pto_timer()) return pt->first;
    return last_activity_ + cfg_.idle_timeout;
}

void Connection::migrate(SocketAddr new_local, TimePoint now) {
    if (!handshake_complete_) throw Error(Errc::HandshakeIncomplete, "migration before handshake completion");
    if (state_ != State::Established) throw Error(Errc::Closed, "connection closed");
    path_.local = new_local;
    path_.validated = false;
    std::array<uint8_t, 8> c{};
    auto r = crypto::random_bytes(8);
    std::copy(r.begin(), r.end(), c.begin());
    challenge_ = c;
    challenge_pending_send_ = true;
    challenge_deadline_ = now + std::max(3 * smoothed_rtt_, cfg_.path_validation_floor);
}

// ---------------------------------------------------------------------------
// Streams

uint64_t Connection::open_stream() {
    if (state_ != State::Handshaking && state_ != State::Established) throw Error(Errc::Closed, "connection closed");
    while (streams_.count(next_local_stream_)) next_local_stream_ += 4;
    uint64_t id = next_local_stream_;
    next_local_stream_ += 4;
    streams_.emplace(id, Stream{});
    return id;
}

void Connection::open_stream(uint64_t id) {
    if (state_ != State::Handshaking && state_ != State::Established) throw Error(Errc::Closed, "connection closed");
    if ((id & 1) != (role_ == Role::Client ? 0u : 1u)) {
        throw Error(Errc::ProtocolViolation, "stream " + std::to_string(id) + " belongs to the peer");
    }
    if (!streams_.emplace(id, Stream{}).second) {
        throw Error(Errc::ProtocolViolation, "stream " + std::to_string(id) + " already open");
    }
}

Connection::Stream& Connection::stream_for_write(uint64_t id) {
    if (state_ != State::Handshaking && state_ != State::Established) throw Error(Errc::Closed, "connection closed");
    auto it = streams_.find(id);
    if (it == streams_.end()) throw Error(Errc::UnknownStream, "stream " + std::to_string(id) + " is not open");
    return it->second;
}

void Connection::stream_write(uint64_t id, ByteView data, bool fin) {
    auto& st = stream_for_write(id);
    if (st.send.fin) throw Error(Errc::ProtocolViolation, "write after fin");
    if (buffered_unsent_ + data.size() > cfg_.max_buffered) {
        throw Error(Errc::FlowControlBlocked, "send buffer full");
    }
    st.send.data.insert(st.send.data.end(), data.begin(), data.end());
    st.send.written += data.size();
    buffered_unsent_ += data.size();
    if (fin) st.send.fin = true;
}

Bytes Connection::stream_read(uint64_t id) {
    auto it = streams_.find(id);
    if (it == streams_.end()) return {};
    auto& rb = it->second.recv;
    Bytes out = std::move(rb.ready);
    rb.ready.clear();
    rb.delivered += out.size();
    return out;
}

bool Connection::stream_finished(uint64_t id) const {
    auto it = streams_.find(id);
    if (it == streams_.end()) return false;
    auto& rb = it->second.recv;
    return rb.fin_at && rb.delivered == *rb.fin_at;
}

size_t Connection::writable_bytes() const {
    return buffered_unsent_ >= cfg_.max_buffered ? 0 : cfg_.max_buffered - buffered_unsent_;
}

size_t Connection::buffered_bytes() const {
    size_t n = 0;
    for (auto& [id, st] : streams_) n += st.send.unacked();
    return n;
}

uint64_t Connection::stream_send_offset(uint64_t id) const {
    auto it = streams_.find(id);
    return it == streams_.end() ? 0 : it->second.send.written;
}

uint64_t Connection::stream_recv_offset(uint64_t id) const {
    auto it = streams_.find(id);
    return it == streams_.end() ? 0 : it->second.recv.delivered;
}

std::vector<uint64_t> Connection::streams() const {
    std::vector<uint64_t> ids;
    for (auto& [id, st] : streams_) ids.push_back(id);
    return ids;
}

}  // namespace quicsb::transport
