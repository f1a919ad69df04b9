#pragma once

// Switch-side and controller-side agents. Each terminates local datagram
// sockets toward its daemons and carries their messages over one QUIC
// connection, one stream per protocol.

#include <atomic>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <variant>

#include "quicsb/codec.hpp"
#include "quicsb/mux.hpp"
#include "quicsb/runtime.hpp"
#include "quicsb/transport/connection.hpp"

namespace quicsb::agent {

using codec::Protocol;

/// Splits a received byte stream back into messages.
class StreamDelimiter {
  public:
    explicit StreamDelimiter(Protocol p);
    std::vector<Bytes> feed(ByteView data);

  private:
    std::variant<codec::OpenFlowDelimiter, codec::JsonDelimiter> d_;
};

/// Drives one Connection over one socket: flushes datagrams, dispatches
/// events and keeps the connection timer armed.
class Driver {
  public:
    using EventFn = std::function<void(const transport::Event&)>;

    Driver(rt::Runtime& rt, std::unique_ptr<transport::Connection> conn, rt::UdpSocket* socket);
    ~Driver();

    void set_on_event(EventFn fn) { on_event_ = std::move(fn); }
    /// Called during every pump, before datagrams are pulled.
    void set_on_writable(std::function<void()> fn) { on_writable_ = std::move(fn); }
    void set_socket(rt::UdpSocket* socket) { socket_ = socket; }

    void receive(ByteView data, SocketAddr from);
    void pump();

    transport::Connection& conn() { return *conn_; }
    const transport::Connection& conn() const { return *conn_; }

  private:
    rt::Runtime& rt_;
    std::unique_ptr<transport::Connection> conn_;
    rt::UdpSocket* socket_;
    rt::Timer timer_;
    EventFn on_event_;
    std::function<void()> on_writable_;
    bool pumping_ = false;
    bool again_ = false;
};

inline constexpr size_t kSendQueueLimit = 65536;

struct ClientConfig {
    SocketAddr server;
    /// Local address of the QUIC socket; port 0 picks one.
    SocketAddr quic_local;
    /// Address the daemon-facing sockets bind to.
    uint32_t local_ip = 0x7f000001;
    uint16_t openflow_port = mux::kOpenFlowPort;
    uint16_t ovsdb_port = mux::kOvsdbPort;
    std::optional<std::filesystem::path> session_file;
    size_t recv_buffer = 65536;
    size_t send_queue_limit = kSendQueueLimit;
    Duration reconnect_base = std::chrono::milliseconds(200);
    Duration reconnect_cap = std::chrono::seconds(5);
    transport::ConnectionConfig connection;
    transport::KeyLogger keylog;

    /// Throws InvalidConfig.
    void validate() const;
};

struct ClientCounters {
    uint64_t local_received = 0;     // datagrams from daemons
    uint64_t local_dropped = 0;      // unknown origin
    uint64_t local_enqueued = 0;
    uint64_t records_written = 0;    // handed to streams
    uint64_t remote_messages = 0;    // delivered to daemons
    uint64_t remote_bytes = 0;
    uint64_t undeliverable = 0;      // no daemon address known yet
    uint64_t auth_failures = 0;
    uint64_t reconnects = 0;
    uint64_t migrations = 0;
};

/// Sees every record as it is written to a stream.
using StreamTap = std::function<void(uint64_t stream_id, uint16_t origin_port, ByteView data)>;

class AgentClient {
  public:
    /// Binds both daemon sockets and starts connecting. Throws BindFailure,
    /// InvalidConfig.
    AgentClient(rt::Runtime& rt, ClientConfig cfg);
    ~AgentClient();

    /// Queues a datagram received from a local daemon. Throws UnknownOrigin
    /// (and counts the drop) when origin_port is neither daemon port.
    void on_local_message(uint16_t origin_port, ByteView data);
    /// Writes queued records to their streams. Returns records written.
    size_t flush_streams();
    /// Hands a datagram from the network to the connection.
    void feed_data(ByteView packet, SocketAddr from);
    /// Rebinds the QUIC socket to a new local port and migrates the path.
    /// Throws HandshakeIncomplete, BindFailure.
    void migrate(uint16_t new_port);

    bool established() const;
    transport::Connection* connection();
    const mux::ConnMap& conn_map() const { return conn_map_; }
    SocketAddr quic_local() const;
    size_t queued() const { return queue_.size(); }
    bool paused() const { return paused_; }
    ClientCounters counters() const;
    std::optional<Errc> last_error() const { return last_error_; }
    void set_stream_tap(StreamTap tap) { tap_ = std::move(tap); }
    /// Closes the connection and stops reconnecting.
    void shutdown();

  private:
    struct Record {
        Bytes data;
        uint16_t origin;
    };

    void connect();
    void on_event(const transport::Event& e);
    void on_readable(uint64_t id);
    void schedule_reconnect();
    void set_paused(bool paused);

    rt::Runtime& rt_;
    ClientConfig cfg_;
    std::unique_ptr<rt::UdpSocket> of_sock_;
    std::unique_ptr<rt::UdpSocket> odb_sock_;
    std::unique_ptr<rt::UdpSocket> quic_sock_;
    std::map<uint16_t, SocketAddr> daemon_addr_;
    std::unique_ptr<Driver> driver_;
    std::unique_ptr<Driver> retired_;
    std::optional<transport::SessionTicket> ticket_;
    std::deque<Record> queue_;
    bool paused_ = false;
    mux::MuxPolicy policy_;
    mux::ConnMap conn_map_;
    std::map<uint64_t, StreamDelimiter> delimiters_;
    rt::Timer reconnect_timer_;
    Duration backoff_;
    bool stopping_ = false;
    std::optional<Errc> last_error_;
    StreamTap tap_;

    struct Atomics {
        std::atomic<uint64_t> local_received{0}, local_dropped{0}, local_enqueued{0}, records_written{0},
            remote_messages{0}, remote_bytes{0}, undeliverable{0}, reconnects{0}, migrations{0};
    } n_;
};

struct ServerConfig {
    SocketAddr listen;
    std::filesystem::path key_file;
    std::filesystem::path cert_file;
    /// Where the controller daemons listen.
    uint32_t daemon_ip = 0x7f000001;
    uint16_t openflow_port = mux::kOpenFlowPort;
    uint16_t ovsdb_port = mux::kOvsdbPort;
    size_t northbound_limit = kSendQueueLimit;
    Duration unbound_warning = std::chrono::seconds(5);
    transport::ConnectionConfig connection;
    transport::KeyLogger keylog;

    void validate() const;
};

struct ServerCounters {
    uint64_t connections_accepted = 0;
    uint64_t datagrams_dropped = 0;    // no matching connection
    uint64_t unknown_stream = 0;       // data on ids outside the policy
    uint64_t northbound_received = 0;  // datagrams from daemons
    uint64_t northbound_dropped = 0;   // queue overflow
    uint64_t northbound_unbound = 0;   // records that had to wait for a stream
    uint64_t records_written = 0;
    uint64_t southbound_messages = 0;  // delivered to daemons
    uint64_t southbound_bytes = 0;
    uint64_t auth_failures = 0;
};

class AgentServer {
  public:
    /// Throws BadCredentials, BindFailure, InvalidConfig.
    AgentServer(rt::Runtime& rt, ServerConfig cfg);
    ~AgentServer();

    /// Demultiplexes a datagram from the network.
    void accept_packet(ByteView packet, SocketAddr from);
    /// Queues a reply from a local daemon for the stream bound to its port.
    /// Throws UnknownOrigin for other ports. A record queued while the port
    /// has no stream is reported through pending_unbound().
    void forward_northbound(uint16_t origin_port, ByteView data);

    /// The most recent established connection.
    transport::Connection* connection();
    const mux::ConnMap* conn_map() const;
    SocketAddr local() const;
    size_t pending_unbound(uint16_t port) const;
    size_t connections() const { return sessions_.size(); }
    ServerCounters counters() const;
    void set_stream_tap(StreamTap tap) { tap_ = std::move(tap); }

  private:
    struct Session {
        std::unique_ptr<Driver> driver;
        mux::ConnMap map;
        std::map<uint64_t, StreamDelimiter> delimiters;
        std::vector<Bytes> cids;
        bool closed = false;
    };

    void on_event(Session& s, const transport::Event& e);
    void on_readable(Session& s, uint64_t id);
    void flush_northbound();
    void reap();

    rt::Runtime& rt_;
    ServerConfig cfg_;
    std::shared_ptr<transport::ServerContext> ctx_;
    std::unique_ptr<rt::UdpSocket> sock_;
    std::unique_ptr<rt::UdpSocket> of_sock_;
    std::unique_ptr<rt::UdpSocket> odb_sock_;
    std::map<Bytes, std::shared_ptr<Session>> by_cid_;
    std::vector<std::shared_ptr<Session>> sessions_;
    std::weak_ptr<Session> active_;
    std::map<uint16_t, std::deque<Bytes>> northbound_;
    std::optional<TimePoint> unbound_since_;
    rt::Timer warn_timer_;
    StreamTap tap_;
    ServerCounters n_;
};

}  // namespace quicsb::agent
