#include <gtest/gtest.h>

#include <filesystem>

#include "quicsb/pcap.hpp"
#include "quicsb/sim.hpp"

namespace quicsb::rt {
namespace {

using namespace std::chrono_literals;

const uint32_t kA = make_addr(10, 0, 0, 1, 0).ip;
const uint32_t kB = make_addr(10, 0, 0, 2, 0).ip;

struct Net {
    SimRuntime rt;
    std::vector<std::pair<TimePoint, Bytes>> tapped;

    explicit Net(LinkConfig link = {}) : rt(link, 7) {
        rt.add_host(kA);
        rt.add_host(kB);
        rt.set_tap([this](TimePoint t, ByteView p) { tapped.emplace_back(t, Bytes(p.begin(), p.end())); });
    }
};

Bytes pattern(size_t n) {
    Bytes b(n);
    for (size_t i = 0; i < n; ++i) b[i] = static_cast<uint8_t>(i * 31 + 7);
    return b;
}

TEST(SimUdp, DeliversAfterOneWayDelay) {
    Net n;
    auto t0 = n.rt.now();
    TimePoint got{};
    Bytes rx;
    SocketAddr from;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView d, SocketAddr f) {
        got = n.rt.now();
        rx.assign(d.begin(), d.end());
        from = f;
    });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    a->send_to(pattern(100), {kB, 9000});
    ASSERT_TRUE(n.rt.run_until([&] { return !rx.empty(); }, t0 + 1s));
    EXPECT_EQ(rx, pattern(100));
    EXPECT_EQ(from, a->local());
    EXPECT_GE(a->local().port, 49152);
    // 1 ms propagation plus serialization of 128 bytes at 100 Mbit/s.
    auto expect = 1ms + std::chrono::nanoseconds(128 * 8 * 10);
    EXPECT_NEAR(to_seconds(got - t0), to_seconds(expect), 1e-6);
    ASSERT_EQ(n.tapped.size(), 1u);
    EXPECT_EQ(n.tapped[0].second.size(), 128u);
}

TEST(SimUdp, OversizeDatagramDropped) {
    Net n;
    int got = 0;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { ++got; });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    a->send_to(pattern(1472), {kB, 9000});
    a->send_to(pattern(1473), {kB, 9000});
    n.rt.run_for(100ms);
    EXPECT_EQ(got, 1);
    EXPECT_EQ(n.rt.wire().oversize, 1u);
}

TEST(SimUdp, PortsAreExclusive) {
    Net n;
    auto a = n.rt.bind_udp({kA, 5000}, [](ByteView, SocketAddr) {});
    try {
        n.rt.bind_udp({kA, 5000}, [](ByteView, SocketAddr) {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::BindFailure);
    }
    a.reset();
    EXPECT_NO_THROW(n.rt.bind_udp({kA, 5000}, [](ByteView, SocketAddr) {}));
    EXPECT_THROW(n.rt.bind_udp({make_addr(10, 9, 9, 9, 0).ip, 1}, [](ByteView, SocketAddr) {}), Error);
}

TEST(SimUdp, PausedSocketHoldsDatagrams) {
    Net n;
    int got = 0;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { ++got; });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    b->set_paused(true);
    for (int i = 0; i < 5; ++i) a->send_to(pattern(10), {kB, 9000});
    n.rt.run_for(50ms);
    EXPECT_EQ(got, 0);
    b->set_paused(false);
    n.rt.run_for(1ms);
    EXPECT_EQ(got, 5);
}

TEST(SimUdp, BlackholeDropsBothWays) {
    Net n;
    int got_b = 0;
    int got_a = 0;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { ++got_b; });
    auto a = n.rt.bind_udp({kA, 4000}, [&](ByteView, SocketAddr) { ++got_a; });
    n.rt.set_blackhole({kA, 4000}, true);
    a->send_to(pattern(10), {kB, 9000});
    b->send_to(pattern(10), {kA, 4000});
    n.rt.run_for(50ms);
    EXPECT_EQ(got_a + got_b, 0);
    EXPECT_TRUE(n.tapped.empty());
    n.rt.set_blackhole({kA, 4000}, false);
    a->send_to(pattern(10), {kB, 9000});
    n.rt.run_for(50ms);
    EXPECT_EQ(got_b, 1);
}

TEST(SimUdp, InFlightPacketsLostWhenBlackholed) {
    Net n;
    int got = 0;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { ++got; });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    a->send_to(pattern(10), {kB, 9000});
    n.rt.set_blackhole({kB, 9000}, true);
    n.rt.run_for(50ms);
    EXPECT_EQ(got, 0);
    EXPECT_EQ(n.tapped.size(), 1u);
}

TEST(SimUdp, BandwidthSerializesBackToBack) {
    LinkConfig link;
    link.bandwidth_bps = 8'000'000;  // one byte per microsecond
    Net n(link);
    std::vector<TimePoint> at;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { at.push_back(n.rt.now()); });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    for (int i = 0; i < 3; ++i) a->send_to(pattern(972), {kB, 9000});  // 1000 bytes on the wire
    n.rt.run_for(100ms);
    ASSERT_EQ(at.size(), 3u);
    EXPECT_NEAR(to_seconds(at[1] - at[0]), 1e-3, 1e-7);
    EXPECT_NEAR(to_seconds(at[2] - at[1]), 1e-3, 1e-7);
}

TEST(SimUdp, LossRateRoughlyHonoured) {
    LinkConfig link;
    link.loss = 0.2;
    link.bandwidth_bps = 0;
    Net n(link);
    int got = 0;
    auto b = n.rt.bind_udp({kB, 9000}, [&](ByteView, SocketAddr) { ++got; });
    auto a = n.rt.bind_udp({kA, 0}, [](ByteView, SocketAddr) {});
    for (int i = 0; i < 5000; ++i) a->send_to(pattern(10), {kB, 9000});
    n.rt.run_for(100ms);
    EXPECT_NEAR(got / 5000.0, 0.8, 0.03);
}

TEST(SimTimers, OrderAndCancel) {
    SimRuntime rt;
    std::vector<int> order;
    auto t0 = rt.now();
    rt.schedule(t0 + 3ms, [&] { order.push_back(3); });
    auto id = rt.schedule(t0 + 2ms, [&] { order.push_back(2); });
    rt.schedule(t0 + 1ms, [&] { order.push_back(1); });
    rt.schedule(t0 + 1ms, [&] { order.push_back(11); });
    rt.cancel(id);
    rt.run_for(10ms);
    EXPECT_EQ(order, (std::vector<int>{1, 11, 3}));
    EXPECT_EQ(rt.now(), t0 + 10ms);
}

TEST(SimTimers, TimerHelperRearms) {
    SimRuntime rt;
    Timer t(rt);
    int fired = 0;
    t.arm(rt.now() + 5ms, [&] { fired = 1; });
    t.arm(rt.now() + 8ms, [&] { fired = 2; });
    EXPECT_TRUE(t.deadline().has_value());
    rt.run_for(20ms);
    EXPECT_EQ(fired, 2);
    EXPECT_FALSE(t.deadline().has_value());
}

TEST(SimTimers, WallClockAdvances) {
    SimRuntime rt;
    auto w = rt.wall_seconds();
    rt.run_for(5s);
    EXPECT_EQ(rt.wall_seconds(), w + 5);
}

struct TcpPair {
    Net n;
    std::unique_ptr<TcpListener> listener;
    std::shared_ptr<TcpStream> server;
    std::shared_ptr<TcpStream> client;
    Bytes server_rx;
    Bytes client_rx;
    bool connected = false;
    std::optional<Errc> client_closed;
    std::optional<Errc> server_closed;

    explicit TcpPair(LinkConfig link = {}) : n(link) {
        listener = n.rt.listen_tcp({kB, 6653}, [this](std::shared_ptr<TcpStream> s) {
            server = s;
            s->set_handlers({nullptr, [this](ByteView d) { server_rx.insert(server_rx.end(), d.begin(), d.end()); },
                             [this](Errc e) { server_closed = e; }});
        });
        client = n.rt.connect_tcp({kA, 0}, {kB, 6653},
                                  {[this] { connected = true; },
                                   [this](ByteView d) { client_rx.insert(client_rx.end(), d.begin(), d.end()); },
                                   [this](Errc e) { client_closed = e; }});
    }
};

TEST(SimTcp, HandshakeAndTransfer) {
    TcpPair p;
    auto data = pattern(200'000);
    p.client->write(data);  // buffered until connected
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_rx.size() == data.size(); }, p.n.rt.now() + 10s));
    EXPECT_TRUE(p.connected);
    EXPECT_EQ(p.server_rx, data);
    p.server->write(pattern(10));
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.client_rx.size() == 10; }, p.n.rt.now() + 1s));
}

TEST(SimTcp, EveryDataSegmentGetsPureAck) {
    TcpPair p;
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.connected && p.server; }, p.n.rt.now() + 1s));
    p.n.rt.run_for(10ms);
    p.n.tapped.clear();
    p.client->write(pattern(10'000));
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_rx.size() == 10'000; }, p.n.rt.now() + 1s));
    p.n.rt.run_for(10ms);
    size_t data_segments = 0;
    size_t pure_acks = 0;
    for (auto& [t, raw] : p.n.tapped) {
        auto ip = pcap::parse_ip(raw);
        ASSERT_TRUE(ip);
        EXPECT_EQ(ip->transport_header, pcap::kTcpHeader);
        if (!ip->payload.empty()) {
            EXPECT_LE(ip->total_length, 1500u);
            ++data_segments;
        } else {
            EXPECT_EQ(ip->tcp_flags, pcap::tcpflag::Ack);
            ++pure_acks;
        }
    }
    EXPECT_EQ(data_segments, 7u);  // 10000 / 1448 rounded up
    EXPECT_EQ(pure_acks, data_segments);
}

TEST(SimTcp, RecoversFromLoss) {
    LinkConfig link;
    link.loss = 0.05;
    TcpPair p(link);
    auto data = pattern(300'000);
    p.client->write(data);
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_rx.size() == data.size(); }, p.n.rt.now() + 120s));
    EXPECT_EQ(p.server_rx, data);
}

TEST(SimTcp, RefusedWithoutListener) {
    Net n;
    std::optional<Errc> closed;
    auto c = n.rt.connect_tcp({kA, 0}, {kB, 1234}, {nullptr, nullptr, [&](Errc e) { closed = e; }});
    ASSERT_TRUE(n.rt.run_until([&] { return closed.has_value(); }, n.rt.now() + 1s));
    EXPECT_EQ(*closed, Errc::Io);
    EXPECT_FALSE(c->connected());
}

TEST(SimTcp, OrderlyCloseNotifiesPeer) {
    TcpPair p;
    p.client->write(pattern(100));
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_rx.size() == 100; }, p.n.rt.now() + 1s));
    p.client->close();
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_closed.has_value(); }, p.n.rt.now() + 1s));
    EXPECT_EQ(*p.server_closed, Errc::Closed);
    EXPECT_THROW(p.client->write(pattern(1)), Error);
}

TEST(SimTcp, AbortIsSilentAndPeerGetsReset) {
    TcpPair p;
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server != nullptr && p.connected; }, p.n.rt.now() + 1s));
    p.client->abort();
    p.n.rt.run_for(10ms);
    EXPECT_FALSE(p.client_closed.has_value());
    p.server->write(pattern(10));
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_closed.has_value(); }, p.n.rt.now() + 1s));
    EXPECT_EQ(*p.server_closed, Errc::Io);
}

TEST(SimTcp, BlackholedPeerTimesOut) {
    TcpPair p;
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server != nullptr && p.connected; }, p.n.rt.now() + 1s));
    p.n.rt.set_blackhole(p.client->local(), true);
    p.server->write(pattern(10));
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.server_closed.has_value(); }, p.n.rt.now() + 120s));
    EXPECT_EQ(*p.server_closed, Errc::Io);
}

TEST(Pcap, HeadersAndChecksums) {
    SocketAddr a{kA, 1111};
    SocketAddr b{kB, 2222};
    auto u = pcap::build_udp_packet(a, b, pattern(33), 5);
    auto ip = pcap::parse_ip(u);
    ASSERT_TRUE(ip);
    EXPECT_EQ(ip->protocol, pcap::kProtoUdp);
    EXPECT_EQ(ip->src, a);
    EXPECT_EQ(ip->dst, b);
    EXPECT_EQ(ip->total_length, 20u + 8u + 33u);
    EXPECT_EQ(Bytes(ip->payload.begin(), ip->payload.end()), pattern(33));

    // Independent one's-complement check: summing a valid header gives 0xffff.
    auto fold = [](ByteView d, uint32_t sum) {
        for (size_t i = 0; i < d.size(); i += 2) {
            sum += static_cast<uint32_t>(d[i] << 8) + (i + 1 < d.size() ? d[i + 1] : 0u);
        }
        while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
        return sum;
    };
    EXPECT_EQ(fold(ByteView(u).first(20), 0), 0xffffu);
    uint32_t pseudo = (kA >> 16) + (kA & 0xffff) + (kB >> 16) + (kB & 0xffff) + 17 + 41;
    EXPECT_EQ(fold(ByteView(u).subspan(20), pseudo), 0xffffu);

    pcap::TcpFields f{1000, 2000, pcap::tcpflag::Ack | pcap::tcpflag::Psh, 1, 2};
    auto t = pcap::build_tcp_packet(a, b, f, pattern(50));
    auto tp = pcap::parse_ip(t);
    ASSERT_TRUE(tp);
    EXPECT_EQ(tp->transport_header, 32u);
    EXPECT_EQ(tp->tcp_seq, 1000u);
    EXPECT_EQ(tp->tcp_ack, 2000u);
    EXPECT_EQ(tp->payload.size(), 50u);
    uint32_t tpseudo = (kA >> 16) + (kA & 0xffff) + (kB >> 16) + (kB & 0xffff) + 6 + 82;
    EXPECT_EQ(fold(ByteView(t).subspan(20), tpseudo), 0xffffu);

    f.flags = pcap::tcpflag::Syn;
    EXPECT_EQ(pcap::parse_ip(pcap::build_tcp_packet(a, b, f, {}))->transport_header, 40u);
}

TEST(Pcap, RejectsBadPackets) {
    EXPECT_THROW(pcap::parse_ip(Bytes(10, 0x45)), Error);
    auto u = pcap::build_udp_packet({kA, 1}, {kB, 2}, pattern(10));
    u.resize(u.size() - 1);
    EXPECT_THROW(pcap::parse_ip(u), Error);
    Bytes v6(40, 0);
    v6[0] = 0x60;
    EXPECT_FALSE(pcap::parse_ip(v6).has_value());
}

TEST(Pcap, FileRoundTrip) {
    auto path = std::filesystem::temp_directory_path() / "quicsb_runtime_test.pcap";
    {
        pcap::Writer w(path);
        w.write(1.5, pattern(60));
        w.write(2.25, pattern(70));
    }
    auto c = pcap::read(path);
    EXPECT_EQ(c.linktype, pcap::kLinkRaw);
    ASSERT_EQ(c.records.size(), 2u);
    EXPECT_DOUBLE_EQ(c.records[0].timestamp, 1.5);
    EXPECT_DOUBLE_EQ(c.records[1].timestamp, 2.25);
    EXPECT_EQ(c.records[1].data, pattern(70));
    std::filesystem::remove(path);
}

TEST(Pcap, BigEndianNanosecondFile) {
    Bytes f;
    ByteWriter w(f);
    w.u32(0xa1b23c4d);
    w.u16(2);
    w.u16(4);
    w.u32(0);
    w.u32(0);
    w.u32(65535);
    w.u32(pcap::kLinkEthernet);
    w.u32(10);
    w.u32(500'000'000);
    w.u32(3);
    w.u32(3);
    w.bytes(Bytes{1, 2, 3});
    auto c = pcap::parse(f);
    EXPECT_EQ(c.linktype, pcap::kLinkEthernet);
    ASSERT_EQ(c.records.size(), 1u);
    EXPECT_DOUBLE_EQ(c.records[0].timestamp, 10.5);
    f.pop_back();
    EXPECT_THROW(pcap::parse(f), Error);
    EXPECT_THROW(pcap::parse(Bytes(24, 0)), Error);
}

TEST(Pcap, LinkLayers) {
    auto ip = pcap::build_udp_packet({kA, 1}, {kB, 2}, pattern(4));
    Bytes eth(12, 0xaa);
    eth.push_back(0x08);
    eth.push_back(0x00);
    eth.insert(eth.end(), ip.begin(), ip.end());
    EXPECT_EQ(pcap::ip_payload(pcap::kLinkEthernet, eth)->size(), ip.size());
    Bytes vlan(12, 0xaa);
    vlan.insert(vlan.end(), {0x81, 0x00, 0x00, 0x05, 0x08, 0x00});
    vlan.insert(vlan.end(), ip.begin(), ip.end());
    EXPECT_EQ(pcap::ip_payload(pcap::kLinkEthernet, vlan)->size(), ip.size());
    Bytes arp(12, 0xaa);
    arp.insert(arp.end(), {0x08, 0x06, 0, 0});
    EXPECT_FALSE(pcap::ip_payload(pcap::kLinkEthernet, arp).has_value());
    try {
        pcap::ip_payload(113, ip);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::UnsupportedLinkType);
    }
}

TEST(Posix, LoopbackUdpAndTcp) {
    PosixRuntime rt;
    uint32_t lo = make_addr(127, 0, 0, 1, 0).ip;
    Bytes got;
    auto b = rt.bind_udp({lo, 0}, [&](ByteView d, SocketAddr) { got.assign(d.begin(), d.end()); });
    auto a = rt.bind_udp({lo, 0}, [](ByteView, SocketAddr) {});
    a->send_to(pattern(500), b->local());
    ASSERT_TRUE(rt.run_until([&] { return !got.empty(); }, rt.now() + 2s));
    EXPECT_EQ(got, pattern(500));

    std::shared_ptr<TcpStream> server;
    Bytes srx;
    auto l = rt.listen_tcp({lo, 0}, [&](std::shared_ptr<TcpStream> s) {
        server = s;
        s->set_handlers({nullptr, [&](ByteView d) { srx.insert(srx.end(), d.begin(), d.end()); }, nullptr});
    });
    bool up = false;
    auto c = rt.connect_tcp({lo, 0}, l->local(), {[&] { up = true; }, nullptr, nullptr});
    c->write(pattern(100'000));
    ASSERT_TRUE(rt.run_until([&] { return srx.size() == 100'000; }, rt.now() + 5s));
    EXPECT_TRUE(up);
    EXPECT_EQ(srx, pattern(100'000));

    int fired = 0;
    rt.schedule(rt.now() + 20ms, [&] { ++fired; });
    auto id = rt.schedule(rt.now() + 10ms, [&] { fired += 10; });
    rt.cancel(id);
    rt.run_for(50ms);
    EXPECT_EQ(fired, 1);
    EXPECT_THROW(rt.bind_udp(b->local(), [](ByteView, SocketAddr) {}), Error);
}

}  // namespace
}  // namespace quicsb::rt
