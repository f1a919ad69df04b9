#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "quicsb/error.hpp"
#include "quicsb/transport/connection.hpp"

namespace quicsb::transport {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / ("quicsb-transport-" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
}

std::shared_ptr<ServerContext> make_server_context(const std::string& tag) {
    auto d = temp_dir();
    auto key = d / (tag + ".key");
    auto cert = d / (tag + ".crt");
    if (!fs::exists(key)) crypto::write_self_signed(key, cert, "quicsb");
    return ServerContext::load(key, cert);
}

Bytes pattern(size_t n, uint32_t seed) {
    std::mt19937 rng(seed);
    Bytes b(n);
    for (auto& x : b) x = static_cast<uint8_t>(rng());
    return b;
}

// Two connections joined by a virtual network with a fixed one-way delay,
// optional random loss, reordering jitter and per-address blackholes.
struct Pair {
    TimePoint now{};
    Duration one_way = 10ms;
    double loss = 0;
    Duration jitter{};
    std::mt19937 rng{1};
    std::function<bool(const Datagram&, bool to_server)> drop;
    std::set<SocketAddr> blackholed;

    ConnectionConfig cfg;
    std::shared_ptr<ServerContext> ctx = make_server_context("a");
    SocketAddr client_addr = make_addr(10, 0, 0, 2, 40000);
    SocketAddr server_addr = make_addr(10, 0, 0, 1, 4433);
    std::unique_ptr<Connection> client;
    std::unique_ptr<Connection> server;

    std::multimap<TimePoint, std::pair<bool, Datagram>> wire;
    std::vector<Event> client_events;
    std::vector<Event> server_events;
    std::map<uint64_t, Bytes> client_rx;
    std::map<uint64_t, Bytes> server_rx;
    std::optional<TimePoint> first_server_datagram_at;
    std::optional<TimePoint> first_client_datagram_at;

    void start(const std::optional<SessionTicket>& ticket = std::nullopt) {
        client = Connection::connect(cfg, client_addr, server_addr, ticket, now);
    }

    void flush(Connection& c, bool to_server) {
        while (auto d = c.poll_transmit(now)) {
            if (to_server && !first_client_datagram_at) first_client_datagram_at = now;
            if (!to_server && !first_server_datagram_at) first_server_datagram_at = now;
            if (drop && drop(*d, to_server)) continue;
            if (loss > 0 && std::uniform_real_distribution<>(0, 1)(rng) < loss) continue;
            Duration j{};
            if (jitter.count() > 0) j = Duration(std::uniform_int_distribution<int64_t>(0, jitter.count())(rng));
            wire.emplace(now + one_way + j, std::make_pair(to_server, std::move(*d)));
        }
    }

    void drain(Connection& c, std::vector<Event>& events, std::map<uint64_t, Bytes>& rx) {
        while (auto e = c.poll_event()) {
            if (auto* r = std::get_if<event::StreamReadable>(&*e)) {
                auto b = c.stream_read(r->id);
                rx[r->id].insert(rx[r->id].end(), b.begin(), b.end());
            }
            events.push_back(std::move(*e));
        }
        // Data may keep arriving after the first readable notification.
        for (uint64_t id : c.streams()) {
            auto b = c.stream_read(id);
            rx[id].insert(rx[id].end(), b.begin(), b.end());
        }
    }

    void deliver(Datagram d, bool to_server) {
        if (blackholed.count(to_server ? d.from : d.to)) return;
        if (to_server) {
            if (!server) {
                auto pkt = parse_packet(d.data, kServerCidLen);
                server = Connection::accept(cfg, ctx, server_addr, d.from, pkt.header.dcid, pkt.header.scid, now);
            }
            server->receive(d.data, d.from, d.to, now);
        } else {
            client->receive(d.data, d.from, d.to, now);
        }
    }

    // Advances to the next event; returns false when nothing is scheduled.
    bool step() {
        flush(*client, true);
        if (server) flush(*server, false);
        drain(*client, client_events, client_rx);
        if (server) drain(*server, server_events, server_rx);

        std::optional<TimePoint> next;
        auto consider = [&](std::optional<TimePoint> t) {
            if (t && (!next || *t < *next)) next = t;
        };
        if (!wire.empty()) consider(wire.begin()->first);
        consider(client->next_timeout());
        if (server) consider(server->next_timeout());
        if (!next) return false;
        now = std::max(now, *next);

        while (!wire.empty() && wire.begin()->first <= now) {
            auto [to_server, d] = std::move(wire.begin()->second);
            wire.erase(wire.begin());
            deliver(std::move(d), to_server);
        }
        if (auto t = client->next_timeout(); t && *t <= now) client->handle_timeout(now);
        if (server)
            if (auto t = server->next_timeout(); t && *t <= now) server->handle_timeout(now);
        flush(*client, true);
        if (server) flush(*server, false);
        drain(*client, client_events, client_rx);
        if (server) drain(*server, server_events, server_rx);
        return true;
    }

    bool run_until(const std::function<bool()>& done, Duration limit = 60s) {
        auto deadline = now + limit;
        while (!done()) {
            if (now > deadline || !step()) return done();
        }
        return true;
    }

    bool established() { return client->is_established() && server && server->is_established(); }

    template <class E>
    static const E* find(const std::vector<Event>& events) {
        for (auto& e : events)
            if (auto* p = std::get_if<E>(&e)) return p;
        return nullptr;
    }
};

SessionTicket obtain_ticket(Pair& p) {
    p.start();
    EXPECT_TRUE(p.run_until([&] { return Pair::find<event::NewTicket>(p.client_events) != nullptr; }));
    return Pair::find<event::NewTicket>(p.client_events)->ticket;
}

TEST(DetectHeader, LongFormFromHighBit) { EXPECT_EQ(detect_header(Bytes{0xC0}), HeaderForm::Long); }

TEST(DetectHeader, ShortFormWithoutHighBit) { EXPECT_EQ(detect_header(Bytes{0x40}), HeaderForm::Short); }

TEST(DetectHeader, EmptyIsTruncated) {
    try {
        detect_header(Bytes{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::Truncated);
    }
}

TEST(DetectHeader, AllFirstOctets) {
    for (int b = 0; b < 256; ++b) {
        Bytes d{static_cast<uint8_t>(b), 0, 0};
        EXPECT_EQ(detect_header(d), (b & 0x80) ? HeaderForm::Long : HeaderForm::Short);
    }
}

TEST(KeySchedule, InitialSecretsMatchPublishedVector) {
    // Client Initial secret and keys for DCID 8394c8f03e515708.
    static const uint8_t salt[] = {0x38, 0x76, 0x2c, 0xf7, 0xf5, 0x59, 0x34, 0xb3, 0x4d, 0x17,
                                   0x9a, 0xe6, 0xa4, 0xc8, 0x0c, 0xad, 0xcc, 0xbb, 0x7f, 0x0a};
    auto initial = crypto::hkdf_extract(salt, from_hex("8394c8f03e515708"));
    auto client = crypto::hkdf_expand_label(initial, "client in", {}, 32);
    EXPECT_EQ(to_hex(client), "c00cf151ca5be075ed0ebfb5c80323c42d6b7db67881289af4008f1f6c357aea");
    auto aead = crypto::Aead::from_secret(client);
    EXPECT_EQ(to_hex(aead.key()), "1f369613dd76d5467730efcbe3b1a22d");
    EXPECT_EQ(to_hex(aead.iv()), "fa044b2f42a3fd3b46fb255c");
}

TEST(Session, RoundTripsThroughFile) {
    SessionTicket t{"quicsb", pattern(90, 3), pattern(12, 4), 1700000000};
    auto path = temp_dir() / "round.bin";
    save_session(path, t);
    auto back = load_session(path);
    ASSERT_TRUE(back);
    EXPECT_EQ(*back, t);
}

TEST(Session, MissingFileIsAbsent) { EXPECT_FALSE(load_session(temp_dir() / "does-not-exist.bin")); }

TEST(Session, CorruptFileIsAbsent) {
    SessionTicket t{"quicsb", pattern(40, 5), {}, 1};
    auto path = temp_dir() / "corrupt.bin";
    save_session(path, t);
    auto bytes = encode_session(t);
    for (size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= 0x01;
        std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bad.data()), bad.size());
        EXPECT_FALSE(load_session(path)) << "flipped byte " << i;
    }
    std::ofstream(path, std::ios::binary).write("QSB1", 4);
    EXPECT_FALSE(load_session(path));
}

TEST(Session, DecodeRejectsTruncation) {
    auto bytes = encode_session(SessionTicket{"s", pattern(8, 1), {}, 2});
    bytes.pop_back();
    EXPECT_THROW(decode_session(bytes), Error);
}

TEST(Handshake, OneRoundTripWithoutTicket) {
    Pair p;
    p.start();
    std::vector<HandshakePhase> phases{p.client->phase()};
    ASSERT_TRUE(p.run_until([&] {
        if (phases.back() != p.client->phase()) phases.push_back(p.client->phase());
        return p.client->is_established();
    }));
    EXPECT_EQ(p.client->phase(), HandshakePhase::DataExchange);
    EXPECT_FALSE(p.client->is_resumed());
    auto elapsed = *p.client->stats().handshake_completed_at - *p.client->stats().started_at;
    EXPECT_EQ(elapsed, 2 * p.one_way);
    EXPECT_TRUE(std::is_sorted(phases.begin(), phases.end()));
    EXPECT_TRUE(Pair::find<event::HandshakeCompleted>(p.client_events));
    ASSERT_TRUE(p.run_until([&] { return p.server->is_established(); }));
    ASSERT_TRUE(p.run_until([&] { return Pair::find<event::NewTicket>(p.client_events) != nullptr; }));
}

TEST(Handshake, ClientInitialDatagramIsPadded) {
    Pair p;
    p.start();
    auto d = p.client->poll_transmit(p.now);
    ASSERT_TRUE(d);
    EXPECT_GE(d->data.size(), kMinInitialDatagram);
    EXPECT_EQ(detect_header(d->data), HeaderForm::Long);
}

TEST(Handshake, BidirectionalData) {
    Pair p;
    p.start();
    auto id = p.client->open_stream();
    auto payload = pattern(50000, 7);
    p.client->stream_write(id, payload);
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() == payload.size(); }));
    EXPECT_EQ(p.server_rx[id], payload);
    auto reply = pattern(30000, 8);
    p.server->stream_write(id, reply, true);
    ASSERT_TRUE(p.run_until([&] { return p.client->stream_finished(id); }));
    EXPECT_EQ(p.client_rx[id], reply);
}

TEST(Handshake, TimesOutWhenServerUnreachable) {
    Pair p;
    p.drop = [](const Datagram&, bool) { return true; };
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.client->is_closed(); }, 20s));
    auto* c = Pair::find<event::Closed>(p.client_events);
    ASSERT_TRUE(c);
    EXPECT_EQ(c->reason, Errc::HandshakeTimeout);
    EXPECT_EQ(p.now, TimePoint{} + p.cfg.handshake_timeout);
}

TEST(ZeroRtt, FirstApplicationByteDepartsBeforeServerReply) {
    Pair first;
    auto ticket = obtain_ticket(first);

    Pair p;
    p.now = first.now;
    p.start(ticket);
    auto id = p.client->open_stream();
    auto payload = pattern(100, 9);
    p.client->stream_write(id, payload);
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() >= payload.size(); }));
    EXPECT_EQ(p.server_rx[id], payload);
    ASSERT_TRUE(p.client->stats().first_stream_data_sent_at);
    ASSERT_TRUE(p.first_server_datagram_at);
    EXPECT_LT(*p.client->stats().first_stream_data_sent_at, *p.first_server_datagram_at + p.one_way);
    EXPECT_GT(p.client->stats().zero_rtt_packets_sent, 0u);
    ASSERT_TRUE(p.run_until([&] { return p.client->is_established(); }));
    EXPECT_TRUE(p.client->is_resumed());
    EXPECT_TRUE(p.client->early_data_accepted());
    EXPECT_FALSE(Pair::find<event::TicketRejected>(p.client_events));
}

TEST(ZeroRtt, FasterThanFullHandshake) {
    auto time_to_delivery = [](std::optional<SessionTicket> ticket, TimePoint start) {
        Pair p;
        p.now = start;
        p.start(ticket);
        auto id = p.client->open_stream();
        p.client->stream_write(id, pattern(100, 1));
        EXPECT_TRUE(p.run_until([&] { return p.server_rx[id].size() >= 100; }));
        EXPECT_EQ(p.server_rx[id].size(), 100u);
        return p.now - start;
    };
    Pair first;
    auto ticket = obtain_ticket(first);
    auto full = time_to_delivery(std::nullopt, first.now);
    auto resumed = time_to_delivery(ticket, first.now);
    EXPECT_LT(resumed, full);
    EXPECT_EQ(resumed, 10ms);
}

TEST(ZeroRtt, FirstConnectionSendsNoEarlyData) {
    Pair p;
    p.start();
    auto id = p.client->open_stream();
    p.client->stream_write(id, pattern(100, 1));
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() == 100; }));
    EXPECT_EQ(p.client->stats().zero_rtt_packets_sent, 0u);
    EXPECT_GE(*p.client->stats().first_stream_data_sent_at, *p.first_server_datagram_at + p.one_way);
}

TEST(ZeroRtt, RejectedTicketFallsBackTransparently) {
    Pair first;
    auto ticket = obtain_ticket(first);

    Pair p;
    p.ctx = make_server_context("b");  // different credentials, different ticket key
    p.now = first.now;
    p.start(ticket);
    auto id = p.client->open_stream();
    auto payload = pattern(5000, 11);
    p.client->stream_write(id, payload, true);
    ASSERT_TRUE(p.run_until([&] { return p.server && p.server->stream_finished(id); }));
    EXPECT_EQ(p.server_rx[id], payload);
    EXPECT_TRUE(Pair::find<event::TicketRejected>(p.client_events));
    EXPECT_FALSE(p.client->is_resumed());
    EXPECT_FALSE(p.client->early_data_accepted());
}

TEST(ZeroRtt, ExpiredTicketIsNotOffered) {
    Pair first;
    auto ticket = obtain_ticket(first);
    ticket.issued_at -= 8 * 24 * 3600;

    Pair p;
    p.start(ticket);
    auto id = p.client->open_stream();
    p.client->stream_write(id, pattern(100, 2));
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() == 100; }));
    EXPECT_EQ(p.client->stats().zero_rtt_packets_sent, 0u);
    EXPECT_FALSE(p.client->is_resumed());
}

TEST(CryptMessage, KeysUnavailableBeforeKeyAgreement) {
    Pair p;
    p.start();
    try {
        p.client->crypt_message(Direction::Encrypt, HandshakePhase::InitialKeyAgreement, Bytes{1, 2, 3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::KeysUnavailable);
    }
    EXPECT_THROW(p.client->crypt_message(Direction::Encrypt, HandshakePhase::DataExchange, Bytes{1}), Error);
}

class CryptMessageEstablished : public ::testing::Test {
  protected:
    void SetUp() override {
        p.start();
        ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    }
    Pair p;
};

TEST_F(CryptMessageEstablished, RoundTripsInEveryKeyedPhase) {
    std::mt19937 rng(5);
    for (auto phase : {HandshakePhase::InitialDataExchange, HandshakePhase::KeyAgreement, HandshakePhase::DataExchange}) {
        for (int i = 0; i < 50; ++i) {
            auto msg = pattern(std::uniform_int_distribution<size_t>(0, 3000)(rng), i);
            auto sealed = p.client->crypt_message(Direction::Encrypt, phase, msg);
            EXPECT_EQ(p.server->crypt_message(Direction::Decrypt, phase, sealed), msg);
            auto back = p.server->crypt_message(Direction::Encrypt, phase, msg);
            EXPECT_EQ(p.client->crypt_message(Direction::Decrypt, phase, back), msg);
        }
    }
}

TEST_F(CryptMessageEstablished, FlippedBitFailsAuthentication) {
    auto msg = pattern(64, 1);
    auto sealed = p.client->crypt_message(Direction::Encrypt, HandshakePhase::DataExchange, msg);
    for (size_t i = 8; i < sealed.size(); ++i) {
        auto bad = sealed;
        bad[i] ^= 0x10;
        try {
            p.server->crypt_message(Direction::Decrypt, HandshakePhase::DataExchange, bad);
            ADD_FAILURE() << "byte " << i;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::AuthenticationFailed);
        }
    }
}

TEST_F(CryptMessageEstablished, CrossPhaseDecryptFails) {
    auto msg = pattern(64, 2);
    auto sealed = p.client->crypt_message(Direction::Encrypt, HandshakePhase::InitialDataExchange, msg);
    try {
        p.server->crypt_message(Direction::Decrypt, HandshakePhase::DataExchange, sealed);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::AuthenticationFailed);
    }
}

TEST_F(CryptMessageEstablished, InitialPhaseUsesKeysDerivedFromOriginalCid) {
    // Independent derivation of the client Initial key from the original DCID.
    static const uint8_t salt[] = {0x38, 0x76, 0x2c, 0xf7, 0xf5, 0x59, 0x34, 0xb3, 0x4d, 0x17,
                                   0x9a, 0xe6, 0xa4, 0xc8, 0x0c, 0xad, 0xcc, 0xbb, 0x7f, 0x0a};
    auto initial = crypto::hkdf_extract(salt, p.server->original_dcid());
    auto ik_c = crypto::Aead::from_secret(crypto::hkdf_expand_label(initial, "client in", {}, 32));
    auto msg = pattern(100, 3);
    auto sealed = p.client->crypt_message(Direction::Encrypt, HandshakePhase::InitialDataExchange, msg);
    ByteReader r(sealed);
    uint64_t seq = r.u64();
    EXPECT_EQ(ik_c.open(seq, {}, r.rest()), msg);

    auto sealed_k = p.client->crypt_message(Direction::Encrypt, HandshakePhase::DataExchange, msg);
    ByteReader rk(sealed_k);
    uint64_t seq_k = rk.u64();
    EXPECT_THROW(ik_c.open(seq_k, {}, rk.rest()), Error);
}

struct LossCase {
    double loss;
    int jitter_ms;
    uint32_t seed;
};

class ExactlyOnce : public ::testing::TestWithParam<LossCase> {};

TEST_P(ExactlyOnce, EveryStreamDeliversWhatWasWritten) {
    auto c = GetParam();
    Pair p;
    p.loss = c.loss;
    p.jitter = std::chrono::milliseconds(c.jitter_ms);
    p.rng.seed(c.seed);
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));

    std::map<uint64_t, Bytes> sent_up;
    std::map<uint64_t, Bytes> sent_down;
    for (int i = 0; i < 4; ++i) {
        auto id = p.client->open_stream();
        sent_up[id] = pattern(20000 + 7919 * i, c.seed + i);
        p.client->stream_write(id, sent_up[id], true);
    }
    ASSERT_TRUE(p.run_until([&] {
        for (auto& [id, b] : sent_up)
            if (!p.server->stream_finished(id)) return false;
        return true;
    }));
    for (auto& [id, b] : sent_up) {
        EXPECT_EQ(p.server_rx[id], b) << "stream " << id;
        sent_down[id] = pattern(15000, c.seed * 31 + static_cast<uint32_t>(id));
        p.server->stream_write(id, sent_down[id], true);
    }
    ASSERT_TRUE(p.run_until([&] {
        for (auto& [id, b] : sent_down)
            if (!p.client->stream_finished(id)) return false;
        return true;
    }));
    for (auto& [id, b] : sent_down) EXPECT_EQ(p.client_rx[id], b) << "stream " << id;
}

INSTANTIATE_TEST_SUITE_P(LossAndReorder, ExactlyOnce,
                         ::testing::Values(LossCase{0, 0, 1}, LossCase{0, 15, 2}, LossCase{0.05, 0, 3},
                                           LossCase{0.1, 5, 4}, LossCase{0.2, 20, 5}, LossCase{0.3, 10, 6}));

TEST(Migration, OffsetsAndCidSurviveAPortChange) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    auto id = p.client->open_stream();
    auto payload = pattern(400000, 12);
    p.client->stream_write(id, ByteView(payload).first(200000));
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() >= 100000; }));

    auto cid = p.server->local_cid();
    auto offset_before = p.client->stream_send_offset(id);
    auto old_addr = p.client_addr;
    p.blackholed.insert(old_addr);
    auto new_addr = make_addr(10, 0, 0, 2, 40001);
    p.client->migrate(new_addr, p.now);
    EXPECT_EQ(p.client->stream_send_offset(id), offset_before);
    p.client->stream_write(id, ByteView(payload).subspan(200000), true);

    ASSERT_TRUE(p.run_until([&] { return p.server && p.server->stream_finished(id); }));
    EXPECT_EQ(p.server_rx[id], payload);
    ASSERT_TRUE(p.run_until([&] { return Pair::find<event::PathValidated>(p.client_events) != nullptr; }));
    EXPECT_EQ(p.server->local_cid(), cid);
    EXPECT_EQ(p.server->path().remote, new_addr);
    EXPECT_EQ(p.client->path().local, new_addr);
    EXPECT_TRUE(p.client->path().validated);
    EXPECT_TRUE(Pair::find<event::PathValidated>(p.client_events));
    EXPECT_FALSE(Pair::find<event::Closed>(p.client_events));
    EXPECT_LE(p.client->stats().stream_bytes_sent, payload.size() * 105 / 100);
}

TEST(Migration, IdentityMigrationValidates) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    auto id = p.client->open_stream();
    p.client->stream_write(id, pattern(1000, 1));
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[id].size() == 1000; }));
    p.client->migrate(p.client_addr, p.now);
    ASSERT_TRUE(p.run_until([&] { return Pair::find<event::PathValidated>(p.client_events) != nullptr; }));
    EXPECT_TRUE(p.client->path().validated);
    EXPECT_EQ(p.client->stream_send_offset(id), 1000u);
    EXPECT_EQ(p.server->stream_recv_offset(id), 1000u);
}

TEST(Migration, BlackholedPathFailsValidation) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    auto dead = make_addr(10, 0, 0, 2, 40009);
    p.blackholed.insert(dead);
    auto t0 = p.now;
    p.client->migrate(dead, p.now);
    ASSERT_TRUE(p.run_until([&] { return Pair::find<event::PathValidationFailed>(p.client_events) != nullptr; }));
    EXPECT_FALSE(p.client->path().validated);
    EXPECT_GE(p.now - t0, p.cfg.path_validation_floor);
    EXPECT_FALSE(p.client->path_validation_pending());
}

TEST(Migration, RequiresDataExchange) {
    Pair p;
    p.start();
    try {
        p.client->migrate(make_addr(10, 0, 0, 2, 1), p.now);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::HandshakeIncomplete);
    }
}

TEST(Retransmit, DeadlineIsInTheFutureAfterSending) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    auto id = p.client->open_stream();
    p.client->stream_write(id, pattern(500, 1));
    p.flush(*p.client, true);
    auto d1 = p.client->schedule_retransmit();
    auto d2 = p.client->schedule_retransmit();
    EXPECT_GT(d1, p.now);
    EXPECT_EQ(d1, d2);
}

TEST(Retransmit, LostPacketIsResentAfterDeadline) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    auto id = p.client->open_stream();
    auto payload = pattern(500, 2);
    p.client->stream_write(id, payload, true);
    bool dropped = false;
    p.drop = [&](const Datagram&, bool to_server) {
        if (to_server && !dropped) return dropped = true;
        return false;
    };
    p.flush(*p.client, true);
    ASSERT_TRUE(dropped);
    auto deadline = p.client->schedule_retransmit();
    ASSERT_TRUE(p.run_until([&] { return p.server && p.server->stream_finished(id); }));
    EXPECT_EQ(p.server_rx[id], payload);
    EXPECT_GE(p.now, deadline + p.one_way);
    EXPECT_GE(p.client->stats().stream_frames_sent, 2u);
}

TEST(Retransmit, ClosedConnectionThrows) {
    Pair p;
    p.start();
    ASSERT_TRUE(p.run_until([&] { return p.established(); }));
    p.client->close(Errc::Closed, "bye", p.now);
    ASSERT_TRUE(p.run_until([&] { return p.client->is_closed(); }));
    try {
        p.client->schedule_retransmit();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::Closed);
    }
    ASSERT_TRUE(p.run_until([&] { return p.server->is_closed(); }));
    EXPECT_TRUE(Pair::find<event::Closed>(p.server_events));
}

TEST(Streams, WriteAfterCloseAndUnknownStream) {
    Pair p;
    p.start();
    try {
        p.client->stream_write(1000, Bytes{1});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::UnknownStream);
    }
    auto id = p.client->open_stream();
    p.client->close(Errc::Closed, "", p.now);
    try {
        p.client->stream_write(id, Bytes{1});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::Closed);
    }
}

TEST(Streams, BufferLimitBlocksWriters) {
    Pair p;
    p.cfg.max_buffered = 10000;
    p.start();
    auto id = p.client->open_stream();
    p.client->stream_write(id, pattern(8000, 1));
    EXPECT_EQ(p.client->writable_bytes(), 2000u);
    try {
        p.client->stream_write(id, pattern(4000, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::FlowControlBlocked);
    }
}

TEST(Streams, ClientIdsAreBidirectionalClientInitiated) {
    Pair p;
    p.start();
    EXPECT_EQ(p.client->open_stream(), 0u);
    EXPECT_EQ(p.client->open_stream(), 4u);
    EXPECT_EQ(p.client->open_stream(), 8u);
}

TEST(Streams, ExplicitIdsFollowParity) {
    Pair p;
    p.start();
    p.client->open_stream(6);
    p.client->open_stream(2);
    EXPECT_THROW(p.client->open_stream(6), Error);
    EXPECT_THROW(p.client->open_stream(7), Error);
    p.client->stream_write(6, pattern(10, 1));
    p.client->stream_write(2, pattern(20, 2));
    ASSERT_TRUE(p.run_until([&] { return p.server_rx[6].size() == 10 && p.server_rx[2].size() == 20; }));
    p.server->stream_write(6, pattern(5, 3));
    ASSERT_TRUE(p.run_until([&] { return p.client_rx[6].size() == 5; }));
    EXPECT_THROW(p.server->open_stream(8), Error);
}

}  // namespace
}  // namespace quicsb::transport
