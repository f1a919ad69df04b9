#include "quicsb/sim.hpp"

#include <deque>
#include <map>
#include <set>

#include "quicsb/pcap.hpp"

namespace quicsb::rt {

namespace {

constexpr Duration kLocalDelay = std::chrono::microseconds(20);
constexpr int64_t kWallBase = 1'700'000'000;
constexpr uint16_t kEphemeralBase = 49152;

using Key = std::pair<SocketAddr, SocketAddr>;  // (local, remote)

class SimUdp;
class SimTcp;
class SimListener;

}  // namespace

struct SimRuntime::Impl {
    LinkConfig link;
    TcpConfig tcp;
    std::mt19937_64 rng;
    TimePoint now = TimePoint{} + std::chrono::hours(1);
    uint64_t seq = 0;
    std::map<std::pair<TimePoint, uint64_t>, std::pair<TimerId, std::function<void()>>> queue;
    std::map<TimerId, std::pair<TimePoint, uint64_t>> timers;
    TimerId next_timer = 1;

    std::set<uint32_t> hosts;
    std::map<uint32_t, uint16_t> next_port;
    std::set<SocketAddr> blackholes;
    TapFn tap;
    WireCounters wire;
    std::map<std::pair<uint32_t, uint32_t>, TimePoint> busy_until;  // per direction
    uint16_t ip_id = 0;

    std::map<SocketAddr, SimUdp*> udp;
    std::map<SocketAddr, SimListener*> listeners;
    std::map<Key, std::shared_ptr<SimTcp>> tcp_conns;
    std::set<std::pair<uint8_t, SocketAddr>> used;  // (proto, addr)

    TimerId at(TimePoint t, std::function<void()> fn) {
        TimerId id = next_timer++;
        auto key = std::make_pair(std::max(t, now), seq++);
        queue.emplace(key, std::make_pair(id, std::move(fn)));
        timers.emplace(id, key);
        return id;
    }
    void cancel(TimerId id) {
        auto it = timers.find(id);
        if (it == timers.end()) return;
        queue.erase(it->second);
        timers.erase(it);
    }

    SocketAddr claim(uint8_t proto, SocketAddr local) {
        if (local.ip != 0 && !hosts.count(local.ip)) {
            throw Error(Errc::BindFailure, "no simulated host " + local.ip_string());
        }
        if (local.port == 0) {
            auto& next = next_port.try_emplace(local.ip, kEphemeralBase).first->second;
            do {
                local.port = next++;
                if (next == 0) next = kEphemeralBase;
            } while (used.count({proto, local}));
        }
        if (!used.insert({proto, local}).second) {
            throw Error(Errc::BindFailure, "address in use: " + local.to_string());
        }
        return local;
    }
    void release(uint8_t proto, SocketAddr local) { used.erase({proto, local}); }

    bool same_host(uint32_t a, uint32_t b) const { return a == b || (a >> 24) == 127 || (b >> 24) == 127; }

    /// Routes an IPv4 packet; delivery happens in a later event.
    void transmit(Bytes packet, SocketAddr src, SocketAddr dst);
    void deliver(const Bytes& packet);
    void deliver_tcp(const pcap::IpPacket& p);
    void send_rst(SocketAddr from, SocketAddr to, uint32_t ack);
};

namespace {

class SimUdp final : public UdpSocket {
  public:
    SimUdp(SimRuntime::Impl& rt, SocketAddr local, RecvFn cb) : rt_(rt), local_(local), cb_(std::move(cb)) {
        rt_.udp[local_] = this;
    }
    ~SimUdp() override {
        rt_.udp.erase(local_);
        rt_.release(pcap::kProtoUdp, local_);
    }
    void send_to(ByteView data, SocketAddr to) override {
        SocketAddr src = local_;
        if (src.ip == 0) src.ip = to.ip;
        rt_.transmit(pcap::build_udp_packet(src, to, data, rt_.ip_id++), src, to);
    }
    SocketAddr local() const override { return local_; }
    void set_paused(bool paused) override {
        paused_ = paused;
        if (!paused_ && !held_.empty()) {
            auto* self = this;
            rt_.at(rt_.now, [&rt = rt_, addr = local_, self] {
                auto it = rt.udp.find(addr);
                if (it != rt.udp.end() && it->second == self) self->release_held();
            });
        }
    }
    void receive(ByteView data, SocketAddr from) {
        if (paused_) {
            held_.emplace_back(Bytes(data.begin(), data.end()), from);
            return;
        }
        cb_(data, from);
    }

  private:
    void release_held() {
        while (!paused_ && !held_.empty()) {
            auto [d, from] = std::move(held_.front());
            held_.pop_front();
            cb_(d, from);
        }
    }

    SimRuntime::Impl& rt_;
    SocketAddr local_;
    RecvFn cb_;
    bool paused_ = false;
    std::deque<std::pair<Bytes, SocketAddr>> held_;
};

class SimListener final : public TcpListener {
  public:
    SimListener(SimRuntime::Impl& rt, SocketAddr local, AcceptFn cb) : rt_(rt), local_(local), cb_(std::move(cb)) {
        rt_.listeners[local_] = this;
    }
    ~SimListener() override {
        rt_.listeners.erase(local_);
        rt_.release(pcap::kProtoTcp, local_);
    }
    SocketAddr local() const override { return local_; }
    void accept(std::shared_ptr<TcpStream> s) { cb_(std::move(s)); }

  private:
    SimRuntime::Impl& rt_;
    SocketAddr local_;
    AcceptFn cb_;
};

// One end of an emulated TCP connection. Go-back-N retransmission, fixed
// receive window, a pure ACK for every data segment received.
class SimTcp final : public TcpStream, public std::enable_shared_from_this<SimTcp> {
  public:
    enum class State { SynSent, SynReceived, Established, Closed };

    SimTcp(SimRuntime::Impl& rt, SocketAddr local, SocketAddr remote, State st, bool owns_port)
        : rt_(rt), local_(local), remote_(remote), state_(st), owns_port_(owns_port), rto_timer_(0) {
        iss_ = static_cast<uint32_t>(rt_.rng());
        snd_una_ = snd_nxt_ = iss_ + 1;
        rto_ = rt_.tcp.initial_rto;
    }
    ~SimTcp() override {
        if (rto_timer_) rt_.cancel(rto_timer_);
    }

    void write(ByteView data) override {
        if (state_ == State::Closed || fin_queued_) throw Error(Errc::Closed, "stream closed");
        out_.insert(out_.end(), data.begin(), data.end());
        pump();
    }
    void close() override {
        if (state_ == State::Closed || fin_queued_) return;
        fin_queued_ = true;
        pump();
    }
    void abort() override { detach(); }
    bool connected() const override { return state_ == State::Established; }
    SocketAddr local() const override { return local_; }
    SocketAddr remote() const override { return remote_; }
    void set_handlers(TcpHandlers h) override { h_ = std::move(h); }

    void send_syn(bool ack) {
        pcap::TcpFields f{iss_, ack ? rcv_nxt_ : 0, static_cast<uint8_t>(pcap::tcpflag::Syn | (ack ? pcap::tcpflag::Ack : 0)),
                          ts(), ts_recent_};
        emit(f, {});
        arm_rto();
    }

    void on_segment(const pcap::IpPacket& p) {
        if (state_ == State::Closed) return;
        uint32_t seq = p.tcp_seq;
        uint32_t ack = p.tcp_ack;
        uint8_t flags = p.tcp_flags;
        if (flags & pcap::tcpflag::Rst) {
            fail(Errc::Io);
            return;
        }
        if (state_ == State::SynSent) {
            if ((flags & pcap::tcpflag::Syn) && (flags & pcap::tcpflag::Ack) && ack == iss_ + 1) {
                rcv_nxt_ = seq + 1;
                state_ = State::Established;
                retries_ = 0;
                disarm_rto();
                emit({snd_nxt_, rcv_nxt_, pcap::tcpflag::Ack, ts(), ts_recent_}, {});
                auto keep = shared_from_this();
                if (h_.on_connect) h_.on_connect();
                pump();
            }
            return;
        }
        if (state_ == State::SynReceived) {
            if (flags & pcap::tcpflag::Syn) {
                send_syn(true);  // retransmitted SYN
                return;
            }
            if ((flags & pcap::tcpflag::Ack) && ack == iss_ + 1) {
                state_ = State::Established;
                retries_ = 0;
                disarm_rto();
                pump();
            } else {
                return;
            }
        }
        if (flags & pcap::tcpflag::Syn) {
            // Our final handshake ACK was lost; repeat it.
            emit({snd_nxt_, rcv_nxt_, pcap::tcpflag::Ack, ts(), ts_recent_}, {});
            return;
        }
        auto keep = shared_from_this();
        if (flags & pcap::tcpflag::Ack) on_ack(ack);
        if (state_ == State::Closed) return;

        bool fin = flags & pcap::tcpflag::Fin;
        if (!p.payload.empty() || fin) {
            if (seq == rcv_nxt_) {
                rcv_nxt_ += static_cast<uint32_t>(p.payload.size());
                if (fin) rcv_nxt_ += 1;
                emit({snd_nxt_, rcv_nxt_, pcap::tcpflag::Ack, ts(), ts_recent_}, {});
                if (!p.payload.empty() && h_.on_data) h_.on_data(p.payload);
                if (fin && state_ != State::Closed) {
                    peer_fin_ = true;
                    maybe_finish();
                    if (state_ != State::Closed && h_.on_close) {
                        auto cb = h_.on_close;
                        h_.on_close = nullptr;
                        cb(Errc::Closed);
                    }
                }
            } else {
                // Out of order or duplicate: re-acknowledge what we have.
                emit({snd_nxt_, rcv_nxt_, pcap::tcpflag::Ack, ts(), ts_recent_}, {});
            }
        }
    }

    void detach() {
        if (state_ == State::Closed) return;
        state_ = State::Closed;
        if (rto_timer_) rt_.cancel(rto_timer_);
        rto_timer_ = 0;
        auto keep = shared_from_this();
        rt_.tcp_conns.erase({local_, remote_});
        if (owns_port_) rt_.release(pcap::kProtoTcp, local_);
    }

  private:
    struct Segment {
        uint32_t seq;
        Bytes data;
        bool fin;
    };

    uint32_t ts() const {
        return static_cast<uint32_t>(std::chrono::duration_cast<std::chrono::milliseconds>(rt_.now.time_since_epoch()).count());
    }

    size_t mss() const { return rt_.link.mtu - pcap::kIpHeader - pcap::kTcpHeader; }

    void emit(const pcap::TcpFields& f, ByteView payload) {
        rt_.transmit(pcap::build_tcp_packet(local_, remote_, f, payload, rt_.ip_id++), local_, remote_);
    }

    void pump() {
        if (state_ != State::Established) return;
        while (true) {
            uint32_t in_flight = snd_nxt_ - snd_una_;
            if (!out_.empty()) {
                size_t room = rt_.tcp.window > in_flight ? rt_.tcp.window - in_flight : 0;
                size_t n = std::min({out_.size(), mss(), room});
                if (n == 0) break;
                Segment s{snd_nxt_, Bytes(out_.begin(), out_.begin() + static_cast<ptrdiff_t>(n)), false};
                out_.erase(out_.begin(), out_.begin() + static_cast<ptrdiff_t>(n));
                snd_nxt_ += static_cast<uint32_t>(n);
                send_segment(s);
                unacked_.push_back(std::move(s));
                continue;
            }
            if (fin_queued_ && !fin_sent_) {
                Segment s{snd_nxt_, {}, true};
                snd_nxt_ += 1;
                fin_sent_ = true;
                send_segment(s);
                unacked_.push_back(std::move(s));
            }
            break;
        }
        if (!unacked_.empty() && !rto_timer_) arm_rto();
    }

    void send_segment(const Segment& s) {
        uint8_t flags = pcap::tcpflag::Ack;
        if (!s.data.empty()) flags |= pcap::tcpflag::Psh;
        if (s.fin) flags |= pcap::tcpflag::Fin;
        emit({s.seq, rcv_nxt_, flags, ts(), ts_recent_}, s.data);
    }

    void on_ack(uint32_t ack) {
        if (static_cast<int32_t>(ack - snd_una_) <= 0) return;
        if (static_cast<int32_t>(ack - snd_nxt_) > 0) return;
        snd_una_ = ack;
        while (!unacked_.empty()) {
            auto& s = unacked_.front();
            uint32_t end = s.seq + static_cast<uint32_t>(s.data.size()) + (s.fin ? 1 : 0);
            if (static_cast<int32_t>(end - snd_una_) > 0) break;
            unacked_.pop_front();
        }
        retries_ = 0;
        rto_ = rt_.tcp.initial_rto;
        disarm_rto();
        pump();
        if (!unacked_.empty()) arm_rto();
        maybe_finish();
    }

    void maybe_finish() {
        if (fin_sent_ && unacked_.empty() && peer_fin_) detach();
    }

    void arm_rto() {
        disarm_rto();
        std::weak_ptr<SimTcp> weak = weak_from_this();
        rto_timer_ = rt_.at(rt_.now + rto_, [weak] {
            if (auto self = weak.lock()) {
                self->rto_timer_ = 0;
                self->on_rto();
            }
        });
    }
    void disarm_rto() {
        if (rto_timer_) rt_.cancel(rto_timer_);
        rto_timer_ = 0;
    }

    void on_rto() {
        if (state_ == State::Closed) return;
        if (++retries_ > rt_.tcp.max_retries) {
            fail(Errc::Io);
            return;
        }
        rto_ = std::min(2 * rto_, rt_.tcp.max_rto);
        if (state_ == State::SynSent) {
            send_syn(false);
            return;
        }
        if (state_ == State::SynReceived) {
            send_syn(true);
            return;
        }
        for (auto& s : unacked_) send_segment(s);
        if (!unacked_.empty()) arm_rto();
    }

    void fail(Errc why) {
        auto keep = shared_from_this();
        detach();
        if (h_.on_close) {
            auto cb = h_.on_close;
            h_ = {};
            cb(why);
        }
    }

    SimRuntime::Impl& rt_;
    SocketAddr local_;
    SocketAddr remote_;
    State state_;
    bool owns_port_;
    TcpHandlers h_;
    uint32_t iss_ = 0;
    uint32_t snd_una_ = 0;
    uint32_t snd_nxt_ = 0;
    uint32_t rcv_nxt_ = 0;
    uint32_t ts_recent_ = 0;
    Bytes out_;
    std::deque<Segment> unacked_;
    bool fin_queued_ = false;
    bool fin_sent_ = false;
    bool peer_fin_ = false;
    Duration rto_;
    int retries_ = 0;
    TimerId rto_timer_;

    friend struct quicsb::rt::SimRuntime::Impl;

  public:
    void set_rcv_nxt(uint32_t v) { rcv_nxt_ = v; }
};

}  // namespace

void SimRuntime::Impl::transmit(Bytes packet, SocketAddr src, SocketAddr dst) {
    if (same_host(src.ip, dst.ip)) {
        at(now + kLocalDelay, [this, p = std::move(packet)] { deliver(p); });
        return;
    }
    if (!hosts.count(dst.ip)) return;
    if (blackholes.count(src) || blackholes.count(dst)) {
        wire.dropped++;
        return;
    }
    if (packet.size() > link.mtu) {
        wire.oversize++;
        return;
    }
    auto& busy = busy_until.try_emplace({src.ip, dst.ip}, now).first->second;
    TimePoint start = std::max(now, busy);
    Duration tx{};
    if (link.bandwidth_bps > 0) {
        tx = std::chrono::duration_cast<Duration>(
            std::chrono::duration<double>(static_cast<double>(packet.size()) * 8.0 / static_cast<double>(link.bandwidth_bps)));
    }
    busy = start + tx;
    wire.packets++;
    wire.bytes += packet.size();
    auto arrive = start + tx + link.one_way;
    if (tap) {
        // The tap sees the packet when its transmission starts.
        if (start == now) {
            tap(now, packet);
        } else {
            at(start, [this, p = packet, start] { tap(start, p); });
        }
    }
    if (link.loss > 0 && std::uniform_real_distribution<>(0, 1)(rng) < link.loss) {
        wire.dropped++;
        return;
    }
    at(arrive, [this, p = std::move(packet), dst] {
        if (blackholes.count(dst)) {
            wire.dropped++;
            return;
        }
        deliver(p);
    });
}

void SimRuntime::Impl::deliver(const Bytes& packet) {
    auto p = pcap::parse_ip(packet);
    if (!p) return;
    if (p->protocol == pcap::kProtoUdp) {
        auto it = udp.find(p->dst);
        if (it == udp.end()) it = udp.find({0, p->dst.port});
        if (it == udp.end()) return;
        static_cast<SimUdp*>(it->second)->receive(p->payload, p->src);
        return;
    }
    deliver_tcp(*p);
}

void SimRuntime::Impl::send_rst(SocketAddr from, SocketAddr to, uint32_t ack) {
    pcap::TcpFields f{0, ack, static_cast<uint8_t>(pcap::tcpflag::Rst | pcap::tcpflag::Ack), 0, 0};
    transmit(pcap::build_tcp_packet(from, to, f, {}, ip_id++), from, to);
}

void SimRuntime::Impl::deliver_tcp(const pcap::IpPacket& p) {
    auto it = tcp_conns.find({p.dst, p.src});
    if (it != tcp_conns.end()) {
        auto conn = it->second;
        conn->on_segment(p);
        return;
    }
    if (p.tcp_flags & pcap::tcpflag::Rst) return;
    bool syn = (p.tcp_flags & pcap::tcpflag::Syn) && !(p.tcp_flags & pcap::tcpflag::Ack);
    uint32_t seq = p.tcp_seq;
    if (syn) {
        auto l = listeners.find(p.dst);
        if (l == listeners.end()) l = listeners.find({0, p.dst.port});
        if (l != listeners.end()) {
            auto conn = std::make_shared<SimTcp>(*this, p.dst, p.src, SimTcp::State::SynReceived, false);
            conn->set_rcv_nxt(seq + 1);
            tcp_conns[{p.dst, p.src}] = conn;
            conn->send_syn(true);
            static_cast<SimListener*>(l->second)->accept(conn);
            return;
        }
    }
    send_rst(p.dst, p.src, seq + static_cast<uint32_t>(p.payload.size()) + 1);
}

SimRuntime::SimRuntime(LinkConfig link, uint64_t seed) : impl_(std::make_unique<Impl>()) {
    impl_->link = link;
    impl_->rng.seed(seed);
}

SimRuntime::~SimRuntime() {
    // Connections hold references into impl_; drop them first.
    auto conns = std::move(impl_->tcp_conns);
    impl_->tcp_conns.clear();
    conns.clear();
    impl_->queue.clear();
}

void SimRuntime::add_host(uint32_t ip) { impl_->hosts.insert(ip); }
LinkConfig& SimRuntime::link() { return impl_->link; }
TcpConfig& SimRuntime::tcp() { return impl_->tcp; }
void SimRuntime::set_blackhole(SocketAddr endpoint, bool on) {
    if (on) {
        impl_->blackholes.insert(endpoint);
    } else {
        impl_->blackholes.erase(endpoint);
    }
}
void SimRuntime::set_tap(TapFn tap) { impl_->tap = std::move(tap); }
const WireCounters& SimRuntime::wire() const { return impl_->wire; }

TimePoint SimRuntime::now() const { return impl_->now; }

int64_t SimRuntime::wall_seconds() const {
    return kWallBase + std::chrono::duration_cast<std::chrono::seconds>(impl_->now.time_since_epoch()).count();
}

std::unique_ptr<UdpSocket> SimRuntime::bind_udp(SocketAddr local, RecvFn on_recv) {
    local = impl_->claim(pcap::kProtoUdp, local);
    return std::make_unique<SimUdp>(*impl_, local, std::move(on_recv));
}

std::shared_ptr<TcpStream> SimRuntime::connect_tcp(SocketAddr local, SocketAddr remote, TcpHandlers h) {
    local = impl_->claim(pcap::kProtoTcp, local);
    auto conn = std::make_shared<SimTcp>(*impl_, local, remote, SimTcp::State::SynSent, true);
    conn->set_handlers(std::move(h));
    impl_->tcp_conns[{local, remote}] = conn;
    conn->send_syn(false);
    return conn;
}

std::unique_ptr<TcpListener> SimRuntime::listen_tcp(SocketAddr local, AcceptFn on_accept) {
    local = impl_->claim(pcap::kProtoTcp, local);
    return std::make_unique<SimListener>(*impl_, local, std::move(on_accept));
}

TimerId SimRuntime::schedule(TimePoint at, std::function<void()> fn) { return impl_->at(at, std::move(fn)); }

void SimRuntime::cancel(TimerId id) { impl_->cancel(id); }

bool SimRuntime::run_until(const std::function<bool()>& done, TimePoint deadline) {
    auto& q = impl_->queue;
    while (!done()) {
        if (q.empty() || q.begin()->first.first > deadline) {
            impl_->now = std::max(impl_->now, deadline);
            return done();
        }
        auto node = q.extract(q.begin());
        impl_->now = std::max(impl_->now, node.key().first);
        impl_->timers.erase(node.mapped().first);
        node.mapped().second();
    }
    return true;
}

}  // namespace quicsb::rt
