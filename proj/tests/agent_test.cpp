#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "quicsb/agent.hpp"
#include "quicsb/endpoints.hpp"
#include "quicsb/harness.hpp"
#include "quicsb/sim.hpp"
#include "quicsb/transport/crypto.hpp"

namespace quicsb {
namespace {

using namespace std::chrono_literals;
using harness::Testbed;
using harness::Transport;

const uint32_t kA = make_addr(10, 0, 0, 1, 0).ip;
const uint32_t kB = make_addr(10, 0, 0, 2, 0).ip;

class Creds : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        dir_ = std::filesystem::temp_directory_path() / ("quicsb-agent-test-" + std::to_string(::getpid()));
        std::filesystem::create_directories(dir_);
        transport::crypto::write_self_signed(key(), cert(), "quicsb");
    }
    static void TearDownTestSuite() { std::filesystem::remove_all(dir_); }
    static std::filesystem::path key() { return dir_ / "k.pem"; }
    static std::filesystem::path cert() { return dir_ / "c.pem"; }

    static std::filesystem::path dir_;
};
std::filesystem::path Creds::dir_;

struct Net {
    rt::SimRuntime rt;
    explicit Net(rt::LinkConfig link = {}) : rt(link, 3) {
        rt.add_host(kA);
        rt.add_host(kB);
    }
};

template <class F>
Errc code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no quicsb::Error thrown";
    return Errc::Io;
}

agent::ServerConfig server_cfg(const std::filesystem::path& key, const std::filesystem::path& cert) {
    agent::ServerConfig s;
    s.listen = {kB, 4433};
    s.key_file = key;
    s.cert_file = cert;
    s.daemon_ip = kB;
    return s;
}

agent::ClientConfig client_cfg() {
    agent::ClientConfig c;
    c.server = {kB, 4433};
    c.quic_local = {kA, 0};
    c.local_ip = kA;
    return c;
}

// --- agent pair -------------------------------------------------------------

using AgentPair = Creds;

TEST_F(AgentPair, InterleavedMessagesArriveOnceInOrderAndApart) {
    Net n;
    harness::IdentityConfig cfg;
    cfg.client_ip = kA;
    cfg.server_ip = kB;
    cfg.daemon_ip = kB;
    cfg.messages = 2000;
    cfg.key_file = key();
    cfg.cert_file = cert();
    auto r = harness::run_identity(n.rt, cfg);
    EXPECT_TRUE(r.finished);
    for (auto* d : {&r.openflow_up, &r.ovsdb_up, &r.openflow_down, &r.ovsdb_down}) {
        EXPECT_TRUE(d->clean()) << d->sent << " sent, " << d->received << " received, " << d->lost << " lost, "
                                << d->duplicated << " dup, " << d->reordered << " reordered, " << d->cross
                                << " cross";
    }
    EXPECT_EQ(r.openflow_up.sent + r.ovsdb_up.sent, 2000u);
    EXPECT_TRUE(r.ids_follow_policy());
    EXPECT_EQ(r.openflow_streams, std::set<uint64_t>{6});
    EXPECT_EQ(r.ovsdb_streams, std::set<uint64_t>{2});
    EXPECT_TRUE(r.ok());
}

TEST_F(AgentPair, UnknownOriginIsCountedAndRejected) {
    Net n;
    agent::AgentServer server(n.rt, server_cfg(key(), cert()));
    agent::AgentClient client(n.rt, client_cfg());
    Bytes msg{1, 2, 3};
    EXPECT_EQ(code_of([&] { client.on_local_message(7777, msg); }), Errc::UnknownOrigin);
    EXPECT_EQ(client.counters().local_dropped, 1u);
    EXPECT_EQ(client.queued(), 0u);
}

TEST_F(AgentPair, EqualDaemonPortsAreABindFailure) {
    auto c = client_cfg();
    c.ovsdb_port = c.openflow_port;
    EXPECT_EQ(code_of([&] { c.validate(); }), Errc::BindFailure);
    auto s = server_cfg(key(), cert());
    s.ovsdb_port = s.openflow_port;
    EXPECT_EQ(code_of([&] { s.validate(); }), Errc::InvalidConfig);
}

TEST_F(AgentPair, ServerRejectsMissingCredentials) {
    Net n;
    auto s = server_cfg(dir_ / "nope.pem", cert());
    EXPECT_EQ(code_of([&] { agent::AgentServer server(n.rt, s); }), Errc::BadCredentials);
}

TEST_F(AgentPair, DuplicateDaemonPortIsABindFailure) {
    Net n;
    auto taken = n.rt.bind_udp({kA, mux::kOpenFlowPort}, [](ByteView, SocketAddr) {});
    EXPECT_EQ(code_of([&] { agent::AgentClient client(n.rt, client_cfg()); }), Errc::BindFailure);
}

TEST_F(AgentPair, NorthboundWaitsForABoundStream) {
    Net n;
    agent::AgentServer server(n.rt, server_cfg(key(), cert()));
    auto hello = codec::encode_openflow(codec::ofpt::Hello, 1, {}).payload;
    server.forward_northbound(mux::kOpenFlowPort, hello);
    EXPECT_EQ(server.pending_unbound(mux::kOpenFlowPort), 1u);
    EXPECT_EQ(server.counters().northbound_unbound, 1u);
    EXPECT_EQ(code_of([&] { server.forward_northbound(1234, hello); }), Errc::UnknownOrigin);

    // Once the client opens the OpenFlow stream the queued record goes out.
    agent::AgentClient client(n.rt, client_cfg());
    Bytes got;
    auto daemon = n.rt.bind_udp({kA, 0}, [&](ByteView d, SocketAddr) { got.assign(d.begin(), d.end()); });
    ASSERT_TRUE(n.rt.run_until([&] { return client.established(); }, n.rt.now() + 5s));
    daemon->send_to(codec::encode_openflow(codec::ofpt::Hello, 2, {}).payload, {kA, mux::kOpenFlowPort});
    ASSERT_TRUE(n.rt.run_until([&] { return !got.empty(); }, n.rt.now() + 5s));
    EXPECT_EQ(got, hello);
    EXPECT_EQ(server.pending_unbound(mux::kOpenFlowPort), 0u);
}

TEST_F(AgentPair, ConnMapsAgreeOnBothSides) {
    harness::TestbedConfig tc;
    tc.workdir = dir_;
    Testbed tb(tc);
    tb.wait_ready();
    auto* sm = tb.server()->conn_map();
    ASSERT_NE(sm, nullptr);
    for (uint16_t port : {mux::kOpenFlowPort, mux::kOvsdbPort}) {
        auto c = tb.client()->conn_map().lookup(port);
        auto s = sm->lookup(port);
        ASSERT_TRUE(c && s);
        EXPECT_EQ(c->id(), s->id());
    }
    EXPECT_EQ(tb.client()->conn_map().lookup(mux::kOpenFlowPort)->id() % 3, 0u);
    EXPECT_NE(tb.client()->conn_map().lookup(mux::kOvsdbPort)->id() % 3, 0u);
    EXPECT_EQ(tb.server()->counters().unknown_stream, 0u);
}

TEST_F(AgentPair, SecondConnectionSendsDataInItsFirstFlight) {
    rt::LinkConfig link;
    link.one_way = 25ms;
    auto r = harness::run_resumption(link, 5, dir_ / "resume");
    EXPECT_FALSE(r.first.data_before_reply());
    EXPECT_FALSE(r.first.zero_rtt);
    EXPECT_TRUE(r.second.data_before_reply());
    EXPECT_TRUE(r.second.zero_rtt);
    EXPECT_TRUE(r.second_resumed);
}

TEST_F(AgentPair, MigrationFailsWhenTheServerIsUnreachable) {
    Net n;
    agent::AgentServer server(n.rt, server_cfg(key(), cert()));
    agent::AgentClient client(n.rt, client_cfg());
    ASSERT_TRUE(n.rt.run_until([&] { return client.established(); }, n.rt.now() + 5s));
    n.rt.set_blackhole({kB, 4433}, true);
    auto before = client.quic_local();
    client.migrate(0);
    EXPECT_NE(client.quic_local(), before);
    EXPECT_TRUE(n.rt.run_until([&] { return client.last_error() == Errc::PathValidationTimeout; }, n.rt.now() + 10s));
}

TEST_F(AgentPair, MigrateBeforeHandshakeIsRejected) {
    Net n;
    agent::AgentClient client(n.rt, client_cfg());
    EXPECT_EQ(code_of([&] { client.migrate(0); }), Errc::HandshakeIncomplete);
}

TEST_F(AgentPair, ClientReconnectsAfterTheServerGoesAway) {
    Net n;
    auto server = std::make_unique<agent::AgentServer>(n.rt, server_cfg(key(), cert()));
    auto c = client_cfg();
    c.connection.idle_timeout = 2s;
    agent::AgentClient client(n.rt, c);
    ASSERT_TRUE(n.rt.run_until([&] { return client.established(); }, n.rt.now() + 5s));
    server.reset();
    ASSERT_TRUE(n.rt.run_until([&] { return !client.established(); }, n.rt.now() + 10s));
    server = std::make_unique<agent::AgentServer>(n.rt, server_cfg(key(), cert()));
    EXPECT_TRUE(n.rt.run_until([&] { return client.established(); }, n.rt.now() + 20s));
    EXPECT_GE(client.counters().reconnects, 1u);
}

// --- endpoints --------------------------------------------------------------

TEST(TransportSpec, ParsesBothSchemes) {
    auto u = endpoints::TransportSpec::parse("udp:10.0.0.1:6653");
    EXPECT_EQ(u.scheme, endpoints::Scheme::Udp);
    EXPECT_EQ(u.addr, make_addr(10, 0, 0, 1, 6653));
    auto t = endpoints::TransportSpec::parse("tcp:127.0.0.1:6640");
    EXPECT_EQ(t.scheme, endpoints::Scheme::Tcp);
    EXPECT_EQ(endpoints::TransportSpec::parse(t.to_string()), t);
    EXPECT_EQ(t.to_string(), "tcp:127.0.0.1:6640");
}

TEST(TransportSpec, RejectsUnknownSchemes) {
    EXPECT_EQ(code_of([] { endpoints::TransportSpec::parse("ssl:127.0.0.1:6653"); }), Errc::UnknownScheme);
    EXPECT_EQ(code_of([] { endpoints::TransportSpec::parse("127.0.0.1:6653"); }), Errc::UnknownScheme);
    EXPECT_EQ(code_of([] { endpoints::TransportSpec::parse("tcp:not-an-ip:1"); }), Errc::InvalidConfig);
}

TEST(Roles, ProtocolAndSide) {
    using endpoints::Role;
    EXPECT_EQ(endpoints::protocol_of(Role::OpenFlowSwitch), codec::Protocol::OpenFlow);
    EXPECT_EQ(endpoints::protocol_of(Role::OvsdbController), codec::Protocol::Ovsdb);
    EXPECT_TRUE(endpoints::is_switch(Role::OvsdbSwitch));
    EXPECT_FALSE(endpoints::is_switch(Role::OpenFlowController));
}

struct TcpPair {
    Net n;
    std::unique_ptr<endpoints::ControllerEmulator> ctl;
    std::unique_ptr<endpoints::SwitchEmulator> sw;

    explicit TcpPair(size_t flows = 0, Duration probe = 5s) {
        endpoints::ControllerConfig cc;
        cc.openflow = endpoints::TransportSpec::parse("tcp:10.0.0.2:6653");
        cc.ovsdb = endpoints::TransportSpec::parse("tcp:10.0.0.2:6640");
        ctl = std::make_unique<endpoints::ControllerEmulator>(n.rt, cc);
        endpoints::SwitchConfig sc;
        sc.controller = cc.openflow;
        sc.manager = cc.ovsdb;
        sc.local_ip = kA;
        sc.initial_flows = flows;
        sc.probe_interval = probe;
        sw = std::make_unique<endpoints::SwitchEmulator>(n.rt, sc);
    }
    bool settle() {
        return n.rt.run_until([&] { return sw->active() && ctl->active() && ctl->openflow().messages_received() > 0; },
                              n.rt.now() + 5s);
    }
};

TEST(Services, TcpSwitchGoesFromConnectingToActive) {
    TcpPair p;
    EXPECT_EQ(p.sw->openflow().state(), endpoints::ServiceState::Connecting);
    EXPECT_FALSE(p.sw->active());
    ASSERT_TRUE(p.settle());
    EXPECT_EQ(p.sw->openflow().state(), endpoints::ServiceState::Active);
    EXPECT_EQ(endpoints::to_string(endpoints::ServiceState::Active), "ACTIVE");
}

TEST(Emulators, FlowModsAreAnsweredByBarrierReplies) {
    TcpPair p;
    ASSERT_TRUE(p.settle());
    auto xids = p.ctl->send_flow_mods(25);
    EXPECT_EQ(xids.size(), 25u);
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.ctl->outstanding() == 0; }, p.n.rt.now() + 5s));
    EXPECT_EQ(p.sw->flow_table_size(), 25u);
    EXPECT_EQ(p.sw->counters().flow_mods, 25u);
    EXPECT_EQ(p.ctl->counters().barriers_received, 25u);
    EXPECT_EQ(p.ctl->counters().xid_mismatch, 0u);
}

TEST(Emulators, StatsReplyCoversTheWholeTable) {
    const size_t flows = 1500;  // three reply messages
    TcpPair p(flows);
    ASSERT_TRUE(p.settle());
    uint64_t bytes = 0;
    int parts = 0;
    bool last = false;
    p.ctl->set_on_stats_reply([&](uint32_t, size_t b, bool more) {
        bytes += b;
        ++parts;
        last = !more;
    });
    p.ctl->poll_stats();
    ASSERT_TRUE(p.n.rt.run_until([&] { return last; }, p.n.rt.now() + 5s));
    EXPECT_EQ(parts, 3);
    EXPECT_EQ(bytes, harness::reply_bytes(flows));
    EXPECT_EQ(p.ctl->outstanding(), 0u);
}

TEST(Emulators, QueueTransactGetsAnUpdate) {
    TcpPair p;
    ASSERT_TRUE(p.settle());
    p.ctl->send_queue_transact(7, {1000, 2000});
    ASSERT_TRUE(p.n.rt.run_until([&] { return p.ctl->outstanding() == 0; }, p.n.rt.now() + 5s));
    EXPECT_EQ(p.sw->counters().queue_transacts, 1u);
    EXPECT_EQ(p.ctl->counters().updates_received, 1u);
}

TEST(Emulators, IdleSwitchProbesWithEchoes) {
    TcpPair p(0, 1s);
    ASSERT_TRUE(p.settle());
    auto before = p.ctl->counters().echoes;
    p.n.rt.run_for(5s);
    EXPECT_GE(p.ctl->counters().echoes, before + 4);
}

TEST(Emulators, RebindReconnectsFromANewPort) {
    TcpPair p;
    ASSERT_TRUE(p.settle());
    auto old = p.sw->openflow().local();
    ASSERT_TRUE(old);
    int activations = 0;
    p.ctl->openflow().set_on_active([&] { ++activations; });
    p.sw->rebind();
    ASSERT_TRUE(p.n.rt.run_until([&] { return activations > 0 && p.sw->active(); }, p.n.rt.now() + 5s));
    EXPECT_NE(p.sw->openflow().local()->port, old->port);
    p.ctl->send_flow_mods(1);
    EXPECT_TRUE(p.n.rt.run_until([&] { return p.ctl->outstanding() == 0; }, p.n.rt.now() + 5s));
}

TEST(Emulators, ControllerHoldsMessagesUntilASwitchConnects) {
    TcpPair p;
    p.ctl->send_flow_mods(3);
    ASSERT_TRUE(p.settle());
    EXPECT_TRUE(p.n.rt.run_until([&] { return p.ctl->outstanding() == 0; }, p.n.rt.now() + 5s));
    EXPECT_EQ(p.sw->flow_table_size(), 3u);
}

}  // namespace
}  // namespace quicsb
