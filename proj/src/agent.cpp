#include "quicsb/agent.hpp"

#include <spdlog/spdlog.h>

#include "quicsb/transport/packet.hpp"

namespace quicsb::agent {

using transport::Connection;
namespace event = transport::event;

StreamDelimiter::StreamDelimiter(Protocol p) {
    if (p == Protocol::OpenFlow) {
        d_ = codec::OpenFlowDelimiter{};
    } else {
        d_ = codec::JsonDelimiter{};
    }
}

std::vector<Bytes> StreamDelimiter::feed(ByteView data) {
    return std::visit([&](auto& d) { return d.feed(data); }, d_);
}

// ---------------------------------------------------------------------------

Driver::Driver(rt::Runtime& rt, std::unique_ptr<Connection> conn, rt::UdpSocket* socket)
    : rt_(rt), conn_(std::move(conn)), socket_(socket), timer_(rt) {}

Driver::~Driver() = default;

void Driver::receive(ByteView data, SocketAddr from) {
    conn_->receive(data, from, socket_ ? socket_->local() : SocketAddr{}, rt_.now());
    pump();
}

void Driver::pump() {
    if (pumping_) {
        again_ = true;
        return;
    }
    pumping_ = true;
    auto drain = [this] {
        bool any = false;
        while (auto e = conn_->poll_event()) {
            any = true;
            if (on_event_) on_event_(*e);
        }
        return any;
    };
    do {
        again_ = false;
        drain();
        if (on_writable_ && !conn_->is_closed()) on_writable_();
        auto now = rt_.now();
        while (auto d = conn_->poll_transmit(now)) {
            if (socket_) socket_->send_to(d->data, d->to);
        }
        if (drain()) again_ = true;
    } while (again_);
    pumping_ = false;
    if (auto t = conn_->next_timeout()) {
        timer_.arm(*t, [this] {
            conn_->handle_timeout(rt_.now());
            pump();
        });
    } else {
        timer_.cancel();
    }
}

// ---------------------------------------------------------------------------

void ClientConfig::validate() const {
    if (openflow_port == ovsdb_port) {
        throw Error(Errc::BindFailure, "OpenFlow and OVSDB ports must differ");
    }
    if (recv_buffer < 1500) throw Error(Errc::InvalidConfig, "receive buffer must be at least 1500 bytes");
    if (send_queue_limit == 0) throw Error(Errc::InvalidConfig, "send queue limit must be positive");
}

AgentClient::AgentClient(rt::Runtime& rt, ClientConfig cfg)
    : rt_(rt),
      cfg_(std::move(cfg)),
      conn_map_(cfg_.openflow_port, cfg_.ovsdb_port),
      reconnect_timer_(rt),
      backoff_(cfg_.reconnect_base) {
    cfg_.validate();
    if (!cfg_.connection.wall_clock) cfg_.connection.wall_clock = [&rt] { return rt.wall_seconds(); };
    auto local_cb = [this](uint16_t port) {
        return [this, port](ByteView d, SocketAddr from) {
            daemon_addr_[port] = from;
            try {
                on_local_message(port, d);
            } catch (const Error&) {
            }
        };
    };
    of_sock_ = rt_.bind_udp({cfg_.local_ip, cfg_.openflow_port}, local_cb(cfg_.openflow_port));
    odb_sock_ = rt_.bind_udp({cfg_.local_ip, cfg_.ovsdb_port}, local_cb(cfg_.ovsdb_port));
    quic_sock_ = rt_.bind_udp(cfg_.quic_local, [this](ByteView d, SocketAddr from) { feed_data(d, from); });
    if (cfg_.session_file) ticket_ = transport::load_session(*cfg_.session_file);
    // Connect from the loop so records queued in the same tick can ride
    // the first flight.
    rt_.post([this] {
        if (!driver_ && !stopping_) connect();
    });
}

AgentClient::~AgentClient() {
    stopping_ = true;
    reconnect_timer_.cancel();
    driver_.reset();
    retired_.reset();
}

void AgentClient::connect() {
    auto now = rt_.now();
    auto conn = Connection::connect(cfg_.connection, quic_sock_->local(), cfg_.server, ticket_, now, cfg_.keylog);
    policy_ = {};
    conn_map_ = mux::ConnMap(cfg_.openflow_port, cfg_.ovsdb_port);
    delimiters_.clear();
    driver_ = std::make_unique<Driver>(rt_, std::move(conn), quic_sock_.get());
    driver_->set_on_event([this](const transport::Event& e) { on_event(e); });
    driver_->set_on_writable([this] { flush_streams(); });
    driver_->pump();
}

void AgentClient::on_local_message(uint16_t origin_port, ByteView data) {
    n_.local_received++;
    if (origin_port != cfg_.openflow_port && origin_port != cfg_.ovsdb_port) {
        n_.local_dropped++;
        throw Error(Errc::UnknownOrigin, "datagram from unexpected port " + std::to_string(origin_port));
    }
    queue_.push_back({Bytes(data.begin(), data.end()), origin_port});
    n_.local_enqueued++;
    if (queue_.size() >= cfg_.send_queue_limit) set_paused(true);
    if (driver_) driver_->pump();
}

size_t AgentClient::flush_streams() {
    if (!driver_ || queue_.empty()) return 0;
    auto& c = driver_->conn();
    if (c.is_closed()) return 0;
    size_t written = 0;
    while (!queue_.empty()) {
        auto& r = queue_.front();
        if (c.writable_bytes() < r.data.size()) break;  // FlowControlBlocked: retry on the next pump
        auto label = conn_map_.lookup(r.origin);
        if (!label) {
            Protocol p = r.origin == cfg_.openflow_port ? Protocol::OpenFlow : Protocol::Ovsdb;
            label = policy_.next_for(p);
            c.open_stream(label->id());
            conn_map_.bind(r.origin, *label);
        }
        c.stream_write(label->id(), r.data);
        if (tap_) tap_(label->id(), r.origin, r.data);
        queue_.pop_front();
        ++written;
    }
    n_.records_written += written;
    if (paused_ && queue_.size() < cfg_.send_queue_limit / 2) set_paused(false);
    return written;
}

void AgentClient::feed_data(ByteView packet, SocketAddr from) {
    if (driver_) driver_->receive(packet, from);
}

void AgentClient::on_event(const transport::Event& e) {
    if (auto* r = std::get_if<event::StreamReadable>(&e)) {
        on_readable(r->id);
    } else if (std::get_if<event::HandshakeCompleted>(&e)) {
        backoff_ = cfg_.reconnect_base;
        last_error_.reset();
    } else if (auto* t = std::get_if<event::NewTicket>(&e)) {
        ticket_ = t->ticket;
        if (cfg_.session_file) {
            try {
                transport::save_session(*cfg_.session_file, t->ticket);
            } catch (const Error& err) {
                spdlog::warn("cannot save session: {}", err.what());
            }
        }
    } else if (std::get_if<event::TicketRejected>(&e)) {
        ticket_.reset();
    } else if (auto* f = std::get_if<event::PathValidationFailed>(&e)) {
        spdlog::warn("path validation failed for {}", f->path.local.to_string());
        last_error_ = Errc::PathValidationTimeout;
    } else if (auto* cl = std::get_if<event::Closed>(&e)) {
        if (cl->reason != Errc::Closed) last_error_ = cl->reason;
        if (!stopping_) {
            spdlog::info("connection closed ({}), reconnecting", cl->detail);
            schedule_reconnect();
        }
    }
}

void AgentClient::on_readable(uint64_t id) {
    auto& c = driver_->conn();
    Bytes data = c.stream_read(id);
    if (data.empty()) return;
    Protocol p;
    try {
        p = mux::classify(id);
    } catch (const Error&) {
        // Server-initiated streams are outside the policy.
        return;
    }
    auto it = delimiters_.try_emplace(id, p).first;
    std::vector<Bytes> msgs;
    try {
        msgs = it->second.feed(data);
    } catch (const Error& err) {
        spdlog::warn("stream {}: {}", id, err.what());
        return;
    }
    uint16_t port = conn_map_.port_for(p);
    auto& sock = p == Protocol::OpenFlow ? of_sock_ : odb_sock_;
    auto dst = daemon_addr_.find(port);
    for (auto& m : msgs) {
        if (dst == daemon_addr_.end()) {
            n_.undeliverable++;
            continue;
        }
        sock->send_to(m, dst->second);
        n_.remote_messages++;
        n_.remote_bytes += m.size();
    }
}

void AgentClient::schedule_reconnect() {
    if (reconnect_timer_.deadline()) return;
    n_.reconnects++;
    auto delay = backoff_;
    backoff_ = std::min(backoff_ * 2, cfg_.reconnect_cap);
    reconnect_timer_.arm(rt_.now() + delay, [this] {
        // The old driver may still be on the stack of the event that closed it.
        retired_ = std::move(driver_);
        connect();
    });
}

void AgentClient::set_paused(bool paused) {
    if (paused_ == paused) return;
    paused_ = paused;
    of_sock_->set_paused(paused);
    odb_sock_->set_paused(paused);
}

void AgentClient::migrate(uint16_t new_port) {
    if (!driver_ || !driver_->conn().is_established()) {
        throw Error(Errc::HandshakeIncomplete, "cannot migrate before the handshake completes");
    }
    SocketAddr local{quic_sock_->local().ip, new_port};
    auto sock = rt_.bind_udp(local, [this](ByteView d, SocketAddr from) { feed_data(d, from); });
    driver_->conn().migrate(sock->local(), rt_.now());
    driver_->set_socket(sock.get());
    quic_sock_ = std::move(sock);
    n_.migrations++;
    driver_->pump();
}

bool AgentClient::established() const { return driver_ && driver_->conn().is_established() && !driver_->conn().is_closed(); }

Connection* AgentClient::connection() { return driver_ ? &driver_->conn() : nullptr; }

SocketAddr AgentClient::quic_local() const { return quic_sock_->local(); }

ClientCounters AgentClient::counters() const {
    ClientCounters c;
    c.local_received = n_.local_received;
    c.local_dropped = n_.local_dropped;
    c.local_enqueued = n_.local_enqueued;
    c.records_written = n_.records_written;
    c.remote_messages = n_.remote_messages;
    c.remote_bytes = n_.remote_bytes;
    c.undeliverable = n_.undeliverable;
    c.auth_failures = driver_ ? driver_->conn().stats().auth_failures : 0;
    c.reconnects = n_.reconnects;
    c.migrations = n_.migrations;
    return c;
}

void AgentClient::shutdown() {
    stopping_ = true;
    reconnect_timer_.cancel();
    if (driver_ && !driver_->conn().is_closed()) {
        driver_->conn().close(Errc::Closed, "shutdown", rt_.now());
        driver_->pump();
    }
}

// ---------------------------------------------------------------------------

void ServerConfig::validate() const {
    if (openflow_port == ovsdb_port) throw Error(Errc::InvalidConfig, "OpenFlow and OVSDB ports must differ");
    if (northbound_limit == 0) throw Error(Errc::InvalidConfig, "northbound limit must be positive");
}

AgentServer::AgentServer(rt::Runtime& rt, ServerConfig cfg) : rt_(rt), cfg_(std::move(cfg)), warn_timer_(rt) {
    cfg_.validate();
    if (!cfg_.connection.wall_clock) cfg_.connection.wall_clock = [&rt] { return rt.wall_seconds(); };
    ctx_ = transport::ServerContext::load(cfg_.key_file, cfg_.cert_file);
    sock_ = rt_.bind_udp(cfg_.listen, [this](ByteView d, SocketAddr from) { accept_packet(d, from); });
    auto north_cb = [this](uint16_t port) {
        return [this, port](ByteView d, SocketAddr) {
            try {
                forward_northbound(port, d);
            } catch (const Error&) {
            }
        };
    };
    SocketAddr any{cfg_.daemon_ip, 0};
    of_sock_ = rt_.bind_udp(any, north_cb(cfg_.openflow_port));
    odb_sock_ = rt_.bind_udp(any, north_cb(cfg_.ovsdb_port));
}

AgentServer::~AgentServer() {
    by_cid_.clear();
    sessions_.clear();
}

void AgentServer::accept_packet(ByteView packet, SocketAddr from) {
    transport::RawPacket pkt;
    try {
        pkt = transport::parse_packet(packet, transport::kServerCidLen);
    } catch (const Error&) {
        n_.datagrams_dropped++;
        return;
    }
    std::shared_ptr<Session> s;
    if (auto it = by_cid_.find(pkt.header.dcid); it != by_cid_.end()) s = it->second;
    if (!s) {
        if (pkt.header.type != transport::PacketType::Initial || packet.size() < transport::kMinInitialDatagram) {
            n_.datagrams_dropped++;
            return;
        }
        auto conn = Connection::accept(cfg_.connection, ctx_, sock_->local(), from, pkt.header.dcid,
                                       pkt.header.scid, rt_.now(), cfg_.keylog);
        s = std::make_shared<Session>();
        s->map = mux::ConnMap(cfg_.openflow_port, cfg_.ovsdb_port);
        s->cids = {pkt.header.dcid, conn->local_cid()};
        s->driver = std::make_unique<Driver>(rt_, std::move(conn), sock_.get());
        Session* raw = s.get();
        s->driver->set_on_event([this, raw](const transport::Event& e) { on_event(*raw, e); });
        for (auto& cid : s->cids) by_cid_[cid] = s;
        sessions_.push_back(s);
        n_.connections_accepted++;
    }
    auto keep = s;
    s->driver->receive(packet, from);
    if (s->closed) reap();
}

void AgentServer::on_event(Session& s, const transport::Event& e) {
    if (auto* r = std::get_if<event::StreamReadable>(&e)) {
        on_readable(s, r->id);
    } else if (std::get_if<event::HandshakeCompleted>(&e)) {
        // One switch per agent pair: the newest connection takes over.
        for (auto& p : sessions_) {
            if (p.get() == &s) active_ = p;
        }
        s.driver->set_on_writable([this] { flush_northbound(); });
    } else if (auto* cl = std::get_if<event::Closed>(&e)) {
        spdlog::info("connection closed: {}", cl->detail);
        s.closed = true;
        rt_.post([this] { reap(); });
    }
}

void AgentServer::on_readable(Session& s, uint64_t id) {
    auto& c = s.driver->conn();
    Bytes data = c.stream_read(id);
    if (data.empty()) return;
    Protocol p;
    try {
        p = mux::classify(id);
    } catch (const Error&) {
        n_.unknown_stream++;
        return;
    }
    uint16_t port = s.map.port_for(p);
    bool fresh = !s.map.lookup(port);
    s.map.bind(port, mux::StreamLabel(id));
    auto it = s.delimiters.try_emplace(id, p).first;
    std::vector<Bytes> msgs;
    try {
        msgs = it->second.feed(data);
    } catch (const Error& err) {
        spdlog::warn("stream {}: {}", id, err.what());
        return;
    }
    auto& sock = p == Protocol::OpenFlow ? of_sock_ : odb_sock_;
    SocketAddr daemon{cfg_.daemon_ip, port};
    for (auto& m : msgs) {
        sock->send_to(m, daemon);
        n_.southbound_messages++;
        n_.southbound_bytes += m.size();
    }
    if (fresh && !northbound_[port].empty()) s.driver->pump();
}

void AgentServer::forward_northbound(uint16_t origin_port, ByteView data) {
    n_.northbound_received++;
    if (origin_port != cfg_.openflow_port && origin_port != cfg_.ovsdb_port) {
        throw Error(Errc::UnknownOrigin, "datagram from unexpected port " + std::to_string(origin_port));
    }
    auto& q = northbound_[origin_port];
    if (q.size() >= cfg_.northbound_limit) {
        n_.northbound_dropped++;
        return;
    }
    q.emplace_back(data.begin(), data.end());
    auto s = active_.lock();
    if (s && !s->closed) {
        s->driver->pump();
    } else {
        flush_northbound();
    }
}

void AgentServer::flush_northbound() {
    auto s = active_.lock();
    bool waiting = false;
    for (auto& [port, q] : northbound_) {
        if (q.empty()) continue;
        std::optional<mux::StreamLabel> label;
        if (s && !s->closed) label = s->map.lookup(port);
        if (!label) {
            // NoBoundStream: hold until the client opens this protocol's stream.
            waiting = true;
            continue;
        }
        auto& c = s->driver->conn();
        while (!q.empty() && c.writable_bytes() >= q.front().size()) {
            c.stream_write(label->id(), q.front());
            if (tap_) tap_(label->id(), port, q.front());
            q.pop_front();
            n_.records_written++;
        }
    }
    if (waiting && !unbound_since_) {
        unbound_since_ = rt_.now();
        n_.northbound_unbound++;
        warn_timer_.arm(rt_.now() + cfg_.unbound_warning, [this] {
            for (auto& [port, q] : northbound_) {
                if (!q.empty()) spdlog::warn("{} records for port {} still wait for a stream", q.size(), port);
            }
        });
    } else if (!waiting) {
        unbound_since_.reset();
        warn_timer_.cancel();
    }
}

void AgentServer::reap() {
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        if ((*it)->closed) {
            for (auto& cid : (*it)->cids) by_cid_.erase(cid);
            it = sessions_.erase(it);
        } else {
            ++it;
        }
    }
}

Connection* AgentServer::connection() {
    auto s = active_.lock();
    return s && !s->closed ? &s->driver->conn() : nullptr;
}

const mux::ConnMap* AgentServer::conn_map() const {
    auto s = active_.lock();
    return s ? &s->map : nullptr;
}

SocketAddr AgentServer::local() const { return sock_->local(); }

size_t AgentServer::pending_unbound(uint16_t port) const {
    auto it = northbound_.find(port);
    return it == northbound_.end() ? 0 : it->second.size();
}

ServerCounters AgentServer::counters() const {
    ServerCounters c = n_;
    c.auth_failures = 0;
    for (auto& s : sessions_) c.auth_failures += s->driver->conn().stats().auth_failures;
    return c;
}

}  // namespace quicsb::agent
