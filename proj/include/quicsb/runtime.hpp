#pragma once

// Event-loop abstraction shared by the agents, the emulated daemons and the
// harness. PosixRuntime drives real sockets; SimRuntime (sim.hpp) drives a
// deterministic two-host network in virtual time.

#include <functional>
#include <memory>
#include <optional>

#include "quicsb/bytes.hpp"
#include "quicsb/error.hpp"
#include "quicsb/net.hpp"

namespace quicsb::rt {

using RecvFn = std::function<void(ByteView data, SocketAddr from)>;

class UdpSocket {
  public:
    virtual ~UdpSocket() = default;
    virtual void send_to(ByteView data, SocketAddr to) = 0;
    virtual SocketAddr local() const = 0;
    /// While paused, incoming datagrams stay queued below the socket.
    virtual void set_paused(bool paused) = 0;
};

struct TcpHandlers {
    std::function<void()> on_connect;
    std::function<void(ByteView)> on_data;
    /// Called once; Errc::Closed for an orderly shutdown.
    std::function<void(Errc)> on_close;
};

class TcpStream {
  public:
    virtual ~TcpStream() = default;
    /// Buffers data; bytes written before the connection is up are sent once
    /// it is.
    virtual void write(ByteView data) = 0;
    virtual void close() = 0;
    /// Drops the connection without telling the peer.
    virtual void abort() = 0;
    virtual bool connected() const = 0;
    virtual SocketAddr local() const = 0;
    virtual SocketAddr remote() const = 0;
    virtual void set_handlers(TcpHandlers h) = 0;
};

using AcceptFn = std::function<void(std::shared_ptr<TcpStream>)>;

class TcpListener {
  public:
    virtual ~TcpListener() = default;
    virtual SocketAddr local() const = 0;
};

using TimerId = uint64_t;

class Runtime {
  public:
    virtual ~Runtime() = default;

    virtual TimePoint now() const = 0;
    /// Seconds since the Unix epoch; virtual in the simulator.
    virtual int64_t wall_seconds() const = 0;

    /// Port 0 picks an ephemeral port. Throws BindFailure.
    virtual std::unique_ptr<UdpSocket> bind_udp(SocketAddr local, RecvFn on_recv) = 0;
    /// local.port 0 picks an ephemeral port. Throws BindFailure.
    virtual std::shared_ptr<TcpStream> connect_tcp(SocketAddr local, SocketAddr remote, TcpHandlers h) = 0;
    /// Accepted streams must get handlers before the callback returns.
    virtual std::unique_ptr<TcpListener> listen_tcp(SocketAddr local, AcceptFn on_accept) = 0;

    virtual TimerId schedule(TimePoint at, std::function<void()> fn) = 0;
    virtual void cancel(TimerId id) = 0;
    TimerId post(std::function<void()> fn) { return schedule(now(), std::move(fn)); }

    /// Runs until done() holds or the deadline passes. Returns done().
    virtual bool run_until(const std::function<bool()>& done, TimePoint deadline) = 0;
    bool run_for(Duration d) {
        return run_until([] { return false; }, now() + d);
    }
};

/// A timer slot that re-arms in place; cancels itself on destruction.
class Timer {
  public:
    explicit Timer(Runtime& rt) : rt_(&rt) {}
    ~Timer() { cancel(); }
    Timer(const Timer&) = delete;
    Timer& operator=(const Timer&) = delete;

    void arm(TimePoint at, std::function<void()> fn);
    void cancel();
    std::optional<TimePoint> deadline() const { return at_; }

  private:
    Runtime* rt_;
    std::optional<TimerId> id_;
    std::optional<TimePoint> at_;
};

/// Real sockets and a poll() loop. Single-threaded.
class PosixRuntime final : public Runtime {
  public:
    PosixRuntime();
    ~PosixRuntime() override;

    TimePoint now() const override { return Clock::now(); }
    int64_t wall_seconds() const override;
    std::unique_ptr<UdpSocket> bind_udp(SocketAddr local, RecvFn on_recv) override;
    std::shared_ptr<TcpStream> connect_tcp(SocketAddr local, SocketAddr remote, TcpHandlers h) override;
    std::unique_ptr<TcpListener> listen_tcp(SocketAddr local, AcceptFn on_accept) override;
    TimerId schedule(TimePoint at, std::function<void()> fn) override;
    void cancel(TimerId id) override;
    bool run_until(const std::function<bool()>& done, TimePoint deadline) override;
    /// Makes run_until return at its next wake-up. Safe from signal handlers.
    void stop();

    struct Impl;

  private:
    std::unique_ptr<Impl> impl_;
};

}  // namespace quicsb::rt
