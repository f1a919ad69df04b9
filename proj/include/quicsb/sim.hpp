#pragma once

// Deterministic network simulator: hosts joined by one full-duplex link
// with latency, bandwidth, random loss and per-endpoint blackholes. TCP is
// emulated segment by segment so captures show real header accounting.

#include <functional>
#include <memory>
#include <random>

#include "quicsb/runtime.hpp"

namespace quicsb::rt {

struct LinkConfig {
    Duration one_way = std::chrono::milliseconds(1);
    /// Bits per second; 0 means unlimited.
    uint64_t bandwidth_bps = 100'000'000;
    double loss = 0;
    size_t mtu = 1500;
};

struct TcpConfig {
    size_t window = 64 * 1024;
    Duration initial_rto = std::chrono::milliseconds(200);
    Duration max_rto = std::chrono::seconds(3);
    int max_retries = 12;
};

struct WireCounters {
    uint64_t packets = 0;
    uint64_t bytes = 0;
    uint64_t dropped = 0;   // loss and blackholes
    uint64_t oversize = 0;  // UDP datagrams above the MTU
};

/// Called for every inter-host IPv4 packet as it starts onto the wire.
using TapFn = std::function<void(TimePoint, ByteView ip_packet)>;

class SimRuntime final : public Runtime {
  public:
    explicit SimRuntime(LinkConfig link = {}, uint64_t seed = 1);
    ~SimRuntime() override;

    void add_host(uint32_t ip);
    LinkConfig& link();
    TcpConfig& tcp();
    /// Packets from or to a blackholed endpoint never reach the wire, and
    /// packets already on the wire toward it are lost.
    void set_blackhole(SocketAddr endpoint, bool on);
    void set_tap(TapFn tap);
    const WireCounters& wire() const;

    TimePoint now() const override;
    int64_t wall_seconds() const override;
    std::unique_ptr<UdpSocket> bind_udp(SocketAddr local, RecvFn on_recv) override;
    std::shared_ptr<TcpStream> connect_tcp(SocketAddr local, SocketAddr remote, TcpHandlers h) override;
    std::unique_ptr<TcpListener> listen_tcp(SocketAddr local, AcceptFn on_accept) override;
    TimerId schedule(TimePoint at, std::function<void()> fn) override;
    void cancel(TimerId id) override;
    /// When nothing is scheduled before the deadline, virtual time jumps to it.
    bool run_until(const std::function<bool()>& done, TimePoint deadline) override;

    struct Impl;

  private:
    std::unique_ptr<Impl> impl_;
};

}  // namespace quicsb::rt
