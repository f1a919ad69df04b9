#include "quicsb/endpoints.hpp"

#include <spdlog/spdlog.h>

namespace quicsb::endpoints {

namespace {

constexpr Duration kReconnectDelay = std::chrono::seconds(1);

class UdpSwitchService final : public Service {
  public:
    UdpSwitchService(rt::Runtime& rt, const TransportSpec& spec, Role role, MessageFn fn, uint32_t local_ip)
        : Service(spec, role), rt_(rt), fn_(std::move(fn)), local_ip_(local_ip) {
        open();
    }
    ServiceState state() const override { return ServiceState::Active; }
    void send(ByteView msg) override {
        sock_->send_to(msg, spec_.addr);
        ++sent_;
    }
    void rebind() override { open(); }
    std::optional<SocketAddr> local() const override { return sock_->local(); }

  private:
    void open() {
        sock_ = rt_.bind_udp({local_ip_, 0}, [this](ByteView d, SocketAddr) {
            ++received_;
            fn_(Bytes(d.begin(), d.end()));
        });
        // A datagram socket is usable at once.
        rt_.post([this] { activated(); });
    }

    rt::Runtime& rt_;
    MessageFn fn_;
    uint32_t local_ip_;
    std::unique_ptr<rt::UdpSocket> sock_;
};

class UdpControllerService final : public Service {
  public:
    UdpControllerService(rt::Runtime& rt, const TransportSpec& spec, Role role, MessageFn fn)
        : Service(spec, role), fn_(std::move(fn)) {
        sock_ = rt.bind_udp(spec.addr, [this](ByteView d, SocketAddr from) {
            peer_ = from;
            ++received_;
            while (!held_.empty()) {
                sock_->send_to(held_.front(), *peer_);
                held_.pop_front();
            }
            fn_(Bytes(d.begin(), d.end()));
        });
        rt.post([this] { activated(); });
    }
    ServiceState state() const override { return ServiceState::Active; }
    void send(ByteView msg) override {
        ++sent_;
        if (peer_) {
            sock_->send_to(msg, *peer_);
        } else {
            held_.emplace_back(msg.begin(), msg.end());
        }
    }
    void rebind() override {}
    std::optional<SocketAddr> local() const override { return sock_->local(); }

  private:
    MessageFn fn_;
    std::unique_ptr<rt::UdpSocket> sock_;
    std::optional<SocketAddr> peer_;
    std::deque<Bytes> held_;
};

class TcpSwitchService final : public Service {
  public:
    TcpSwitchService(rt::Runtime& rt, const TransportSpec& spec, Role role, MessageFn fn, uint32_t local_ip)
        : Service(spec, role), rt_(rt), fn_(std::move(fn)), local_ip_(local_ip), retry_(rt) {
        open();
    }
    ~TcpSwitchService() override {
        if (stream_) stream_->abort();
    }
    ServiceState state() const override { return active_ ? ServiceState::Active : ServiceState::Connecting; }
    void send(ByteView msg) override {
        ++sent_;
        if (stream_) {
            stream_->write(msg);
        } else {
            held_.emplace_back(msg.begin(), msg.end());
        }
    }
    void rebind() override {
        if (stream_) stream_->abort();
        stream_.reset();
        open();
    }
    std::optional<SocketAddr> local() const override {
        if (!stream_) return std::nullopt;
        return stream_->local();
    }

  private:
    void open() {
        active_ = false;
        retry_.cancel();
        delim_.emplace(protocol_of(role_));
        uint64_t gen = ++generation_;
        stream_ = rt_.connect_tcp(
            {local_ip_, 0}, spec_.addr,
            {[this, gen] {
                 if (gen != generation_) return;
                 active_ = true;
                 activated();
             },
             [this, gen](ByteView d) {
                 if (gen != generation_) return;
                 for (auto& m : delim_->feed(d)) {
                     ++received_;
                     fn_(std::move(m));
                 }
             },
             [this, gen](Errc why) {
                 if (gen != generation_) return;
                 spdlog::info("{} connection to {} closed: {}", role_ == Role::OpenFlowSwitch ? "OpenFlow" : "OVSDB",
                              spec_.addr.to_string(), to_string(why));
                 active_ = false;
                 stream_.reset();
                 retry_.arm(rt_.now() + kReconnectDelay, [this] { open(); });
             }});
        while (!held_.empty()) {
            stream_->write(held_.front());
            held_.pop_front();
        }
    }

    rt::Runtime& rt_;
    MessageFn fn_;
    uint32_t local_ip_;
    rt::Timer retry_;
    std::shared_ptr<rt::TcpStream> stream_;
    std::optional<agent::StreamDelimiter> delim_;
    std::deque<Bytes> held_;
    bool active_ = false;
    uint64_t generation_ = 0;
};

class TcpControllerService final : public Service {
  public:
    TcpControllerService(rt::Runtime& rt, const TransportSpec& spec, Role role, MessageFn fn)
        : Service(spec, role), fn_(std::move(fn)) {
        listener_ = rt.listen_tcp(spec.addr, [this](std::shared_ptr<rt::TcpStream> s) { on_accept(std::move(s)); });
    }
    ~TcpControllerService() override {
        if (stream_) stream_->abort();
    }
    ServiceState state() const override { return stream_ ? ServiceState::Active : ServiceState::Connecting; }
    void send(ByteView msg) override {
        ++sent_;
        if (stream_) {
            stream_->write(msg);
        } else {
            held_.emplace_back(msg.begin(), msg.end());
        }
    }
    void rebind() override {}
    std::optional<SocketAddr> local() const override { return listener_->local(); }

  private:
    void on_accept(std::shared_ptr<rt::TcpStream> s) {
        // The newest switch connection replaces any earlier one.
        if (stream_) stream_->abort();
        stream_ = s;
        uint64_t gen = ++generation_;
        delim_.emplace(protocol_of(role_));
        s->set_handlers({nullptr,
                         [this, gen](ByteView d) {
                             if (gen != generation_) return;
                             for (auto& m : delim_->feed(d)) {
                                 ++received_;
                                 fn_(std::move(m));
                             }
                         },
                         [this, gen](Errc) {
                             if (gen != generation_) return;
                             stream_.reset();
                         }});
        while (!held_.empty()) {
            stream_->write(held_.front());
            held_.pop_front();
        }
        activated();
    }

    MessageFn fn_;
    std::unique_ptr<rt::TcpListener> listener_;
    std::shared_ptr<rt::TcpStream> stream_;
    std::optional<agent::StreamDelimiter> delim_;
    std::deque<Bytes> held_;
    uint64_t generation_ = 0;
};

uint16_t be16(ByteView b, size_t at) { return static_cast<uint16_t>(b[at] << 8 | b[at + 1]); }

}  // namespace

TransportSpec TransportSpec::parse(std::string_view text) {
    auto colon = text.find(':');
    if (colon == std::string_view::npos) throw Error(Errc::UnknownScheme, "missing scheme: " + std::string(text));
    auto scheme = text.substr(0, colon);
    TransportSpec s;
    if (scheme == "udp") {
        s.scheme = Scheme::Udp;
    } else if (scheme == "tcp") {
        s.scheme = Scheme::Tcp;
    } else {
        throw Error(Errc::UnknownScheme, "unknown transport scheme: " + std::string(scheme));
    }
    s.addr = parse_addr(text.substr(colon + 1));
    return s;
}

std::string TransportSpec::to_string() const {
    return std::string(scheme == Scheme::Udp ? "udp:" : "tcp:") + addr.to_string();
}

std::string_view to_string(ServiceState s) { return s == ServiceState::Active ? "ACTIVE" : "CONNECTING"; }

Protocol protocol_of(Role r) {
    return r == Role::OpenFlowSwitch || r == Role::OpenFlowController ? Protocol::OpenFlow : Protocol::Ovsdb;
}

bool is_switch(Role r) { return r == Role::OpenFlowSwitch || r == Role::OvsdbSwitch; }

std::unique_ptr<Service> Service::create(rt::Runtime& rt, const TransportSpec& spec, Role role, MessageFn on_message,
                                         uint32_t local_ip) {
    if (is_switch(role)) {
        if (spec.scheme == Scheme::Udp) {
            return std::make_unique<UdpSwitchService>(rt, spec, role, std::move(on_message), local_ip);
        }
        return std::make_unique<TcpSwitchService>(rt, spec, role, std::move(on_message), local_ip);
    }
    if (spec.scheme == Scheme::Udp) return std::make_unique<UdpControllerService>(rt, spec, role, std::move(on_message));
    return std::make_unique<TcpControllerService>(rt, spec, role, std::move(on_message));
}

// ---------------------------------------------------------------------------

SwitchEmulator::SwitchEmulator(rt::Runtime& rt, SwitchConfig cfg)
    : rt_(rt), cfg_(std::move(cfg)), probe_timer_(rt), flows_(cfg_.initial_flows) {
    last_rx_ = rt_.now();
    of_ = Service::create(
        rt_, cfg_.controller, Role::OpenFlowSwitch, [this](Bytes m) { on_openflow(std::move(m)); }, cfg_.local_ip);
    odb_ = Service::create(
        rt_, cfg_.manager, Role::OvsdbSwitch, [this](Bytes m) { on_ovsdb(std::move(m)); }, cfg_.local_ip);
    of_->set_on_active([this] { send(*of_, codec::encode_openflow(codec::ofpt::Hello, next_xid_++, {}).payload); });
    odb_->set_on_active([this] { send(*odb_, codec::synth_ovsdb_echo("hello").payload); });
    if (cfg_.probe_interval.count() > 0) probe_timer_.arm(rt_.now() + cfg_.probe_interval, [this] { probe(); });
}

SwitchEmulator::~SwitchEmulator() = default;

bool SwitchEmulator::active() const {
    return of_->state() == ServiceState::Active && odb_->state() == ServiceState::Active;
}

void SwitchEmulator::rebind() {
    of_->rebind();
    odb_->rebind();
}

void SwitchEmulator::send(Service& s, ByteView msg) {
    s.send(msg);
    n_.bytes_sent += msg.size();
}

void SwitchEmulator::probe() {
    auto now = rt_.now();
    if (now - last_rx_ >= cfg_.probe_interval) {
        send(*of_, codec::encode_openflow(codec::ofpt::EchoRequest, next_xid_++, {}).payload);
        send(*odb_, codec::synth_ovsdb_echo("probe" + std::to_string(next_echo_++)).payload);
        probe_timer_.arm(now + cfg_.probe_interval, [this] { probe(); });
    } else {
        probe_timer_.arm(last_rx_ + cfg_.probe_interval, [this] { probe(); });
    }
}

void SwitchEmulator::on_openflow(Bytes msg) {
    last_rx_ = rt_.now();
    codec::OpenFlowHeader h;
    try {
        h = codec::decode_openflow_header(msg);
    } catch (const Error&) {
        n_.ignored++;
        return;
    }
    using namespace codec::ofpt;
    switch (h.msg_type) {
    case FlowMod:
        flows_++;
        n_.flow_mods++;
        send(*of_, codec::encode_openflow(BarrierReply, h.xid, {}).payload);
        break;
    case MultipartRequest:
        n_.stats_requests++;
        for (auto& m : codec::synth_multipart(codec::MultipartKind::Reply, flows_, h.xid)) send(*of_, m.payload);
        break;
    case EchoRequest: {
        n_.echoes++;
        auto body = ByteView(msg).subspan(codec::kOpenFlowHeaderSize);
        send(*of_, codec::encode_openflow(EchoReply, h.xid, body).payload);
        break;
    }
    default:
        n_.ignored++;
    }
}

void SwitchEmulator::on_ovsdb(Bytes msg) {
    last_rx_ = rt_.now();
    nlohmann::json rpc;
    try {
        rpc = codec::parse_ovsdb(msg);
    } catch (const Error&) {
        n_.ignored++;
        return;
    }
    auto method = rpc.contains("method") && rpc["method"].is_string() ? rpc["method"].get<std::string>() : "";
    if (method == "transact") {
        try {
            auto t = codec::parse_queue_transact(codec::ControlMessage{Protocol::Ovsdb, msg, std::nullopt});
            n_.queue_transacts++;
            send(*odb_, codec::synth_queue_update(t).payload);
        } catch (const Error&) {
            n_.ignored++;
        }
    } else if (method == "echo") {
        n_.echoes++;
        send(*odb_, codec::synth_ovsdb_echo_reply(rpc).payload);
    } else {
        n_.ignored++;
    }
}

// ---------------------------------------------------------------------------

ControllerEmulator::ControllerEmulator(rt::Runtime& rt, ControllerConfig cfg) : rt_(rt), cfg_(std::move(cfg)) {
    of_ = Service::create(rt_, cfg_.openflow, Role::OpenFlowController, [this](Bytes m) { on_openflow(std::move(m)); });
    odb_ = Service::create(rt_, cfg_.ovsdb, Role::OvsdbController, [this](Bytes m) { on_ovsdb(std::move(m)); });
}

ControllerEmulator::~ControllerEmulator() = default;

bool ControllerEmulator::active() const {
    return of_->state() == ServiceState::Active && odb_->state() == ServiceState::Active;
}

void ControllerEmulator::send(Service& s, ByteView msg) {
    s.send(msg);
    n_.bytes_sent += msg.size();
}

std::vector<uint32_t> ControllerEmulator::send_flow_mods(size_t n, size_t match_fields, size_t actions) {
    std::vector<uint32_t> xids;
    for (size_t i = 0; i < n; ++i) {
        uint32_t xid = next_xid_++;
        send(*of_, codec::synth_flow_mod(match_fields, actions, xid).payload);
        pending_xids_[xid] = codec::ofpt::BarrierReply;
        n_.flow_mods_sent++;
        xids.push_back(xid);
    }
    return xids;
}

uint64_t ControllerEmulator::send_queue_transact(uint64_t queue_id, codec::QueueRates rates) {
    uint64_t id = next_queue_request_++;
    send(*odb_, codec::synth_queue_transact(codec::QueueTransact{id, queue_id, rates}).payload);
    pending_requests_[id] = true;
    n_.queue_transacts_sent++;
    return id;
}

uint32_t ControllerEmulator::poll_stats() {
    uint32_t xid = next_xid_++;
    for (auto& m : codec::synth_multipart(codec::MultipartKind::Request, 0, xid)) send(*of_, m.payload);
    pending_xids_[xid] = codec::ofpt::MultipartReply;
    n_.stats_requests_sent++;
    return xid;
}

void ControllerEmulator::on_openflow(Bytes msg) {
    if (on_message_) on_message_(Protocol::OpenFlow, msg);
    if (keep_log_) log_.push_back({rt_.now(), Protocol::OpenFlow, msg});
    codec::OpenFlowHeader h;
    try {
        h = codec::decode_openflow_header(msg);
    } catch (const Error&) {
        return;
    }
    using namespace codec::ofpt;
    auto expect = [&](uint8_t type) {
        auto it = pending_xids_.find(h.xid);
        if (it == pending_xids_.end() || it->second != type) {
            n_.xid_mismatch++;
            return false;
        }
        return true;
    };
    switch (h.msg_type) {
    case Hello:
        send(*of_, codec::encode_openflow(Hello, h.xid, {}).payload);
        break;
    case EchoRequest:
        n_.echoes++;
        send(*of_, codec::encode_openflow(EchoReply, h.xid, ByteView(msg).subspan(codec::kOpenFlowHeaderSize)).payload);
        break;
    case BarrierReply:
        if (expect(BarrierReply)) pending_xids_.erase(h.xid);
        n_.barriers_received++;
        break;
    case MultipartReply: {
        bool more = msg.size() >= 12 && (be16(msg, 10) & codec::kMultipartReplyMore);
        if (expect(MultipartReply) && !more) pending_xids_.erase(h.xid);
        n_.stats_replies_received++;
        n_.stats_reply_bytes += msg.size();
        if (on_stats_reply_) on_stats_reply_(h.xid, msg.size(), more);
        break;
    }
    default:
        break;
    }
}

void ControllerEmulator::on_ovsdb(Bytes msg) {
    if (on_message_) on_message_(Protocol::Ovsdb, msg);
    if (keep_log_) log_.push_back({rt_.now(), Protocol::Ovsdb, msg});
    nlohmann::json rpc;
    try {
        rpc = codec::parse_ovsdb(msg);
    } catch (const Error&) {
        return;
    }
    if (auto id = codec::update_request_id(rpc)) {
        n_.updates_received++;
        if (pending_requests_.erase(*id) == 0) n_.xid_mismatch++;
        return;
    }
    if (rpc.contains("method") && rpc["method"] == "echo") {
        n_.echoes++;
        send(*odb_, codec::synth_ovsdb_echo_reply(rpc).payload);
    }
}

}  // namespace quicsb::endpoints
