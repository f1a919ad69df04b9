#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>
#include <vector>

#include "quicsb/runtime.hpp"

namespace quicsb::rt {

void Timer::arm(TimePoint at, std::function<void()> fn) {
    cancel();
    at_ = at;
    id_ = rt_->schedule(at, [this, fn = std::move(fn)] {
        id_.reset();
        at_.reset();
        fn();
    });
}

void Timer::cancel() {
    if (id_) rt_->cancel(*id_);
    id_.reset();
    at_.reset();
}

namespace {

sockaddr_in to_sockaddr(SocketAddr a) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(a.ip);
    sa.sin_port = htons(a.port);
    return sa;
}

SocketAddr from_sockaddr(const sockaddr_in& sa) { return {ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port)}; }

SocketAddr local_of(int fd) {
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    return from_sockaddr(sa);
}

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

[[noreturn]] void bind_failure(SocketAddr a, int err) {
    throw Error(Errc::BindFailure, "cannot bind " + a.to_string() + ": " + std::strerror(err));
}

int open_bound(int type, SocketAddr local) {
    int fd = ::socket(AF_INET, type | SOCK_CLOEXEC, 0);
    if (fd < 0) bind_failure(local, errno);
    if (type == SOCK_STREAM) {
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    }
    auto sa = to_sockaddr(local);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
        int err = errno;
        ::close(fd);
        bind_failure(local, err);
    }
    set_nonblocking(fd);
    return fd;
}

}  // namespace

struct PosixRuntime::Impl {
    struct Watch {
        std::function<short()> events;
        std::function<void(short)> ready;
    };
    std::map<int, Watch> watches;
    std::multimap<TimePoint, TimerId> timer_order;
    std::map<TimerId, std::pair<TimePoint, std::function<void()>>> timers;
    TimerId next_timer = 1;
    std::atomic<bool> stopped{false};

    void watch(int fd, Watch w) { watches[fd] = std::move(w); }
    void unwatch(int fd) { watches.erase(fd); }
};

namespace {

class PosixUdp final : public UdpSocket {
  public:
    PosixUdp(PosixRuntime::Impl& rt, int fd, RecvFn cb) : rt_(rt), fd_(fd), cb_(std::move(cb)) {
        int size = 4 << 20;
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &size, sizeof(size));
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDBUF, &size, sizeof(size));
        local_ = local_of(fd_);
        rt_.watch(fd_, {[this] { return paused_ ? short{0} : short{POLLIN}; }, [this](short) { drain(); }});
    }
    ~PosixUdp() override {
        rt_.unwatch(fd_);
        ::close(fd_);
    }

    void send_to(ByteView data, SocketAddr to) override {
        auto sa = to_sockaddr(to);
        // Datagram sockets never block long; a full buffer drops like the network would.
        ::sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    }
    SocketAddr local() const override { return local_; }
    void set_paused(bool paused) override { paused_ = paused; }

  private:
    void drain() {
        for (int i = 0; i < 64 && !paused_; ++i) {
            sockaddr_in from{};
            socklen_t len = sizeof(from);
            ssize_t n = ::recvfrom(fd_, buf_.data(), buf_.size(), 0, reinterpret_cast<sockaddr*>(&from), &len);
            if (n < 0) return;
            cb_(ByteView(buf_.data(), static_cast<size_t>(n)), from_sockaddr(from));
        }
    }

    PosixRuntime::Impl& rt_;
    int fd_;
    RecvFn cb_;
    SocketAddr local_;
    bool paused_ = false;
    std::array<uint8_t, 65536> buf_{};
};

class PosixTcp final : public TcpStream, public std::enable_shared_from_this<PosixTcp> {
  public:
    PosixTcp(PosixRuntime::Impl& rt, int fd, bool connected) : rt_(rt), fd_(fd), connected_(connected) {
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }
    ~PosixTcp() override { shutdown_fd(); }

    void start() {
        auto weak = weak_from_this();
        rt_.watch(fd_, {[this] {
                            short ev = POLLIN;
                            if (!connected_ || !out_.empty()) ev |= POLLOUT;
                            return ev;
                        },
                        [weak](short revents) {
                            if (auto self = weak.lock()) self->on_ready(revents);
                        }});
        // Keep ourselves alive while registered.
        self_ = shared_from_this();
    }

    void write(ByteView data) override {
        if (fd_ < 0) throw Error(Errc::Closed, "stream closed");
        out_.insert(out_.end(), data.begin(), data.end());
        if (connected_) flush();
    }
    void close() override {
        if (fd_ < 0) return;
        if (connected_) flush();
        ::shutdown(fd_, SHUT_WR);
        finish(Errc::Closed, false);
    }
    void abort() override {
        if (fd_ < 0) return;
        linger lg{1, 0};
        ::setsockopt(fd_, SOL_SOCKET, SO_LINGER, &lg, sizeof(lg));
        finish(Errc::Closed, false);
    }
    bool connected() const override { return connected_ && fd_ >= 0; }
    SocketAddr local() const override { return local_; }
    SocketAddr remote() const override { return remote_; }
    void set_handlers(TcpHandlers h) override { h_ = std::move(h); }

    SocketAddr local_;
    SocketAddr remote_;

  private:
    void on_ready(short revents) {
        if (!connected_ && (revents & (POLLOUT | POLLERR | POLLHUP))) {
            int err = 0;
            socklen_t len = sizeof(err);
            ::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
            if (err != 0) return finish(Errc::Io, true);
            connected_ = true;
            local_ = local_of(fd_);
            if (h_.on_connect) h_.on_connect();
            if (fd_ < 0) return;
        }
        if (connected_ && (revents & POLLOUT)) flush();
        if (fd_ >= 0 && (revents & (POLLIN | POLLHUP | POLLERR))) {
            for (int i = 0; i < 16 && fd_ >= 0; ++i) {
                ssize_t n = ::recv(fd_, buf_.data(), buf_.size(), 0);
                if (n > 0) {
                    if (h_.on_data) h_.on_data(ByteView(buf_.data(), static_cast<size_t>(n)));
                    continue;
                }
                if (n == 0) return finish(Errc::Closed, true);
                if (errno == EAGAIN || errno == EWOULDBLOCK) break;
                return finish(Errc::Io, true);
            }
        }
    }

    void flush() {
        while (!out_.empty() && fd_ >= 0) {
            ssize_t n = ::send(fd_, out_.data(), out_.size(), MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EAGAIN || errno == EWOULDBLOCK) return;
                return finish(Errc::Io, true);
            }
            out_.erase(out_.begin(), out_.begin() + n);
        }
    }

    void finish(Errc why, bool notify) {
        auto keep = self_;
        shutdown_fd();
        self_.reset();
        if (notify && h_.on_close) {
            auto cb = std::move(h_.on_close);
            h_ = {};
            cb(why);
        } else {
            h_ = {};
        }
    }

    void shutdown_fd() {
        if (fd_ < 0) return;
        rt_.unwatch(fd_);
        ::close(fd_);
        fd_ = -1;
    }

    PosixRuntime::Impl& rt_;
    int fd_;
    bool connected_;
    Bytes out_;
    TcpHandlers h_;
    std::shared_ptr<PosixTcp> self_;
    std::array<uint8_t, 65536> buf_{};
};

class PosixListener final : public TcpListener {
  public:
    PosixListener(PosixRuntime::Impl& rt, int fd, AcceptFn cb) : rt_(rt), fd_(fd), cb_(std::move(cb)) {
        local_ = local_of(fd_);
        rt_.watch(fd_, {[] { return short{POLLIN}; }, [this](short) { accept_all(); }});
    }
    ~PosixListener() override {
        rt_.unwatch(fd_);
        ::close(fd_);
    }
    SocketAddr local() const override { return local_; }

  private:
    void accept_all() {
        for (;;) {
            sockaddr_in from{};
            socklen_t len = sizeof(from);
            int fd = ::accept4(fd_, reinterpret_cast<sockaddr*>(&from), &len, SOCK_NONBLOCK | SOCK_CLOEXEC);
            if (fd < 0) return;
            auto s = std::make_shared<PosixTcp>(rt_, fd, true);
            s->local_ = local_of(fd);
            s->remote_ = from_sockaddr(from);
            s->start();
            cb_(s);
        }
    }

    PosixRuntime::Impl& rt_;
    int fd_;
    AcceptFn cb_;
    SocketAddr local_;
};

}  // namespace

PosixRuntime::PosixRuntime() : impl_(std::make_unique<Impl>()) {}
PosixRuntime::~PosixRuntime() = default;

int64_t PosixRuntime::wall_seconds() const {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::unique_ptr<UdpSocket> PosixRuntime::bind_udp(SocketAddr local, RecvFn on_recv) {
    int fd = open_bound(SOCK_DGRAM, local);
    return std::make_unique<PosixUdp>(*impl_, fd, std::move(on_recv));
}

std::shared_ptr<TcpStream> PosixRuntime::connect_tcp(SocketAddr local, SocketAddr remote, TcpHandlers h) {
    int fd = open_bound(SOCK_STREAM, local);
    auto sa = to_sockaddr(remote);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    if (rc != 0 && errno != EINPROGRESS) {
        int err = errno;
        ::close(fd);
        throw Error(Errc::Io, "connect " + remote.to_string() + ": " + std::strerror(err));
    }
    auto s = std::make_shared<PosixTcp>(*impl_, fd, false);
    s->local_ = local_of(fd);
    s->remote_ = remote;
    s->set_handlers(std::move(h));
    s->start();
    return s;
}

std::unique_ptr<TcpListener> PosixRuntime::listen_tcp(SocketAddr local, AcceptFn on_accept) {
    int fd = open_bound(SOCK_STREAM, local);
    if (::listen(fd, 64) != 0) {
        int err = errno;
        ::close(fd);
        bind_failure(local, err);
    }
    return std::make_unique<PosixListener>(*impl_, fd, std::move(on_accept));
}

TimerId PosixRuntime::schedule(TimePoint at, std::function<void()> fn) {
    TimerId id = impl_->next_timer++;
    impl_->timers.emplace(id, std::make_pair(at, std::move(fn)));
    impl_->timer_order.emplace(at, id);
    return id;
}

void PosixRuntime::cancel(TimerId id) {
    auto it = impl_->timers.find(id);
    if (it == impl_->timers.end()) return;
    auto range = impl_->timer_order.equal_range(it->second.first);
    for (auto o = range.first; o != range.second; ++o) {
        if (o->second == id) {
            impl_->timer_order.erase(o);
            break;
        }
    }
    impl_->timers.erase(it);
}

void PosixRuntime::stop() { impl_->stopped = true; }

bool PosixRuntime::run_until(const std::function<bool()>& done, TimePoint deadline) {
    impl_->stopped = false;
    std::vector<pollfd> fds;
    while (!done() && !impl_->stopped) {
        auto now = Clock::now();
        // Timers due now run first, in deadline order.
        while (!impl_->timer_order.empty() && impl_->timer_order.begin()->first <= now) {
            auto id = impl_->timer_order.begin()->second;
            impl_->timer_order.erase(impl_->timer_order.begin());
            auto it = impl_->timers.find(id);
            auto fn = std::move(it->second.second);
            impl_->timers.erase(it);
            fn();
            if (done()) return true;
        }
        if (now >= deadline) break;

        auto wake = deadline;
        if (!impl_->timer_order.empty()) wake = std::min(wake, impl_->timer_order.begin()->first);
        auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(wake - now).count();
        int timeout = static_cast<int>(std::clamp<int64_t>(wait, 0, 100));
        if (wake > now && timeout == 0) timeout = 1;

        fds.clear();
        for (auto& [fd, w] : impl_->watches) fds.push_back({fd, w.events(), 0});
        int n = ::poll(fds.data(), fds.size(), timeout);
        if (n <= 0) continue;
        for (auto& p : fds) {
            if (p.revents == 0) continue;
            auto it = impl_->watches.find(p.fd);
            if (it == impl_->watches.end()) continue;
            auto ready = it->second.ready;
            ready(p.revents);
        }
    }
    return done();
}

}  // namespace quicsb::rt
