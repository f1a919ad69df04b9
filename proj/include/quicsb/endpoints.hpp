#pragma once

// Emulated daemons: a switch (ovs-switchd plus ovsdb-server) and a
// controller (OpenFlow plus OVSDB apps). Each talks datagrams to its local
// agent ("udp:" scheme) or TCP straight to its peer ("tcp:" scheme).

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "quicsb/agent.hpp"
#include "quicsb/codec.hpp"
#include "quicsb/runtime.hpp"

namespace quicsb::endpoints {

using codec::Protocol;

enum class Scheme { Udp, Tcp };

struct TransportSpec {
    Scheme scheme = Scheme::Udp;
    SocketAddr addr;

    /// Parses "udp:<ip>:<port>" or "tcp:<ip>:<port>". Throws UnknownScheme,
    /// InvalidConfig.
    static TransportSpec parse(std::string_view text);
    std::string to_string() const;
    bool operator==(const TransportSpec&) const = default;
};

enum class ServiceState { Connecting, Active };
std::string_view to_string(ServiceState s);

enum class Role { OpenFlowSwitch, OvsdbSwitch, OpenFlowController, OvsdbController };

Protocol protocol_of(Role r);
bool is_switch(Role r);

/// One daemon-side connection. Switch roles connect to the spec's address;
/// controller roles listen on it.
class Service {
  public:
    using MessageFn = std::function<void(Bytes)>;

    /// Throws BindFailure. local_ip is the source address for switch roles.
    static std::unique_ptr<Service> create(rt::Runtime& rt, const TransportSpec& spec, Role role,
                                           MessageFn on_message, uint32_t local_ip = 0);
    virtual ~Service() = default;

    virtual ServiceState state() const = 0;
    /// Sends one whole message. Messages sent while CONNECTING wait.
    virtual void send(ByteView msg) = 0;
    /// Switch roles: drops the current connection and starts a new one
    /// from a fresh source port.
    virtual void rebind() = 0;
    /// Local endpoint of the current socket or connection, if any.
    virtual std::optional<SocketAddr> local() const = 0;
    /// Called each time the service becomes ACTIVE.
    void set_on_active(std::function<void()> fn) { on_active_ = std::move(fn); }

    Role role() const { return role_; }
    const TransportSpec& spec() const { return spec_; }
    uint64_t messages_sent() const { return sent_; }
    uint64_t messages_received() const { return received_; }

  protected:
    Service(const TransportSpec& spec, Role role) : spec_(spec), role_(role) {}
    void activated() {
        if (on_active_) on_active_();
    }

    TransportSpec spec_;
    Role role_;
    std::function<void()> on_active_;
    uint64_t sent_ = 0;
    uint64_t received_ = 0;
};

struct SwitchConfig {
    TransportSpec controller;
    TransportSpec manager;
    uint32_t local_ip = 0x7f000001;
    /// Flow entries present before any FLOW_MOD arrives.
    size_t initial_flows = 0;
    /// Echo probes go out after this long without input; zero disables.
    Duration probe_interval = std::chrono::seconds(5);
};

struct SwitchCounters {
    uint64_t flow_mods = 0;
    uint64_t stats_requests = 0;
    uint64_t queue_transacts = 0;
    uint64_t echoes = 0;
    uint64_t ignored = 0;
    uint64_t bytes_sent = 0;
};

class SwitchEmulator {
  public:
    SwitchEmulator(rt::Runtime& rt, SwitchConfig cfg);
    ~SwitchEmulator();

    size_t flow_table_size() const { return flows_; }
    const SwitchCounters& counters() const { return n_; }
    Service& openflow() { return *of_; }
    Service& ovsdb() { return *odb_; }
    bool active() const;
    /// Drops both connections and reconnects from new source ports.
    void rebind();

  private:
    void on_openflow(Bytes msg);
    void on_ovsdb(Bytes msg);
    void probe();
    void send(Service& s, ByteView msg);

    rt::Runtime& rt_;
    SwitchConfig cfg_;
    std::unique_ptr<Service> of_;
    std::unique_ptr<Service> odb_;
    rt::Timer probe_timer_;
    TimePoint last_rx_{};
    size_t flows_ = 0;
    uint32_t next_xid_ = 0x10000000;
    uint64_t next_echo_ = 1;
    SwitchCounters n_;
};

struct ControllerConfig {
    TransportSpec openflow;  // where to listen
    TransportSpec ovsdb;
};

struct ReceivedMessage {
    TimePoint at;
    Protocol protocol;
    Bytes payload;
};

struct ControllerCounters {
    uint64_t flow_mods_sent = 0;
    uint64_t barriers_received = 0;
    uint64_t queue_transacts_sent = 0;
    uint64_t updates_received = 0;
    uint64_t stats_requests_sent = 0;
    uint64_t stats_replies_received = 0;
    uint64_t stats_reply_bytes = 0;
    uint64_t xid_mismatch = 0;
    uint64_t echoes = 0;
    uint64_t bytes_sent = 0;
};

class ControllerEmulator {
  public:
    ControllerEmulator(rt::Runtime& rt, ControllerConfig cfg);
    ~ControllerEmulator();

    /// Workload hooks. Each returns the transaction ids it issued.
    std::vector<uint32_t> send_flow_mods(size_t n, size_t match_fields = 1, size_t actions = 1);
    uint64_t send_queue_transact(uint64_t queue_id, codec::QueueRates rates);
    uint32_t poll_stats();

    bool active() const;
    Service& openflow() { return *of_; }
    Service& ovsdb() { return *odb_; }
    const ControllerCounters& counters() const { return n_; }
    /// Every message received, in arrival order.
    const std::vector<ReceivedMessage>& log() const { return log_; }
    void set_keep_log(bool keep) { keep_log_ = keep; }
    size_t outstanding() const { return pending_xids_.size() + pending_requests_.size(); }
    /// Called for each MULTIPART_REPLY message with the payload size.
    void set_on_stats_reply(std::function<void(uint32_t xid, size_t bytes, bool more)> fn) {
        on_stats_reply_ = std::move(fn);
    }
    void set_on_message(std::function<void(Protocol, ByteView)> fn) { on_message_ = std::move(fn); }

  private:
    void on_openflow(Bytes msg);
    void on_ovsdb(Bytes msg);
    void send(Service& s, ByteView msg);

    rt::Runtime& rt_;
    ControllerConfig cfg_;
    std::unique_ptr<Service> of_;
    std::unique_ptr<Service> odb_;
    uint32_t next_xid_ = 1;
    uint64_t next_queue_request_ = 1;
    std::map<uint32_t, uint8_t> pending_xids_;  // xid -> expected reply type
    std::map<uint64_t, bool> pending_requests_;
    std::vector<ReceivedMessage> log_;
    bool keep_log_ = true;
    std::function<void(uint32_t, size_t, bool)> on_stats_reply_;
    std::function<void(Protocol, ByteView)> on_message_;
    ControllerCounters n_;
};

}  // namespace quicsb::endpoints
