#pragma once

// Experiment orchestration: builds a two-host testbed in the simulator,
// drives a workload, captures the inter-host link and turns the capture
// into TrafficReports.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quicsb/agent.hpp"
#include "quicsb/endpoints.hpp"
#include "quicsb/overhead.hpp"
#include "quicsb/pcap.hpp"
#include "quicsb/sim.hpp"

namespace quicsb::harness {

using overhead::Transport;

inline constexpr int kReportSchema = 1;

enum class Experiment { FlowInstall, QueueConfig, StatsPoll, Migration };

std::string_view to_string(Experiment e);
std::string_view to_string(Transport t);
/// Throws InvalidConfig.
Experiment parse_experiment(std::string_view s);
Transport parse_transport(std::string_view s);

inline constexpr double kMaxSafeRate = 1000;

struct ExperimentConfig {
    Experiment experiment = Experiment::FlowInstall;
    Transport transport = Transport::Quic;
    double rate = 10;      // events per second
    double duration = 10;  // seconds
    size_t n_flows = 100;  // StatsPoll table size
    /// Migration: seconds after the transfer starts, or a fraction of the
    /// transfer delivered; at most one is set. Neither means no break.
    std::optional<double> break_at;
    std::optional<double> break_fraction;
    uint64_t file_bytes = 10'000'000;  // Migration transfer size
    uint64_t seed = 1;
    int repeats = 1;
    bool unsafe_rates = false;
    rt::LinkConfig link;
    std::optional<std::filesystem::path> pcap_out;
    std::optional<std::filesystem::path> keylog_out;

    /// Throws InvalidConfig.
    void validate() const;
};

/// TLS-style key log keyed by server connection id.
class KeyLog {
  public:
    struct Secrets {
        Bytes client;  // 1-RTT, client to server
        Bytes server;  // 1-RTT, server to client
        Bytes early;   // 0-RTT
    };

    void add(std::string_view label, const Bytes& cid, const Bytes& secret);
    transport::KeyLogger sink();
    /// Lines of "LABEL <cid hex> <secret hex>". Throws Io, ParseError.
    static KeyLog read(const std::filesystem::path& path);
    void write(const std::filesystem::path& path) const;
    const std::map<Bytes, Secrets>& entries() const { return by_cid_; }
    bool empty() const { return by_cid_.empty(); }

  private:
    std::map<Bytes, Secrets> by_cid_;
};

struct DirectionStats {
    uint64_t packets = 0;
    uint64_t wire_bytes = 0;
    uint64_t payload_bytes = 0;
};

struct TrafficReport {
    std::string scenario;  // e.g. "flow-install@10"
    Experiment experiment = Experiment::FlowInstall;
    Transport transport = Transport::Quic;
    double rate = 0;
    double duration = 0;  // accounting window, seconds
    uint64_t payload_bytes = 0;
    uint64_t wire_bytes = 0;
    uint64_t overhead_bytes = 0;
    uint64_t packets = 0;
    DirectionStats forward;  // from the first endpoint (switch side)
    DirectionStats reverse;
    // QUIC capture details
    uint64_t short_packets = 0;
    uint64_t short_packets_with_stream = 0;
    uint64_t stream_frames = 0;
    uint64_t undecrypted = 0;
    /// Wire bytes from endpoint counters, when the run had them.
    std::optional<uint64_t> counter_wire_bytes;

    /// Streams per packet: stream frames / short packets carrying one.
    std::optional<double> streams_per_packet() const;
    /// Throws AccountingGap when overhead + payload != wire.
    void check_identity() const;
    nlohmann::json to_json() const;
    static TrafficReport from_json(const nlohmann::json& j);
};

/// Endpoint filter: packets between a and b, either direction. Port 0
/// matches any port.
struct Filter {
    SocketAddr a;
    SocketAddr b;

    /// Parses "ip:port,ip:port"; "*" stands for any port. Throws InvalidConfig.
    static Filter parse(std::string_view text);
    /// 1 for a to b, -1 for b to a, 0 for no match.
    int match(SocketAddr src, SocketAddr dst) const;
};

/// Sums IP lengths of matching packets. TCP payload is the segment
/// payload; with keys, QUIC payload is the STREAM data in decrypted
/// packets. Throws EmptyCapture, UnsupportedLinkType.
TrafficReport analyze_capture(const pcap::Capture& capture, const std::optional<Filter>& filter,
                              const KeyLog* keys = nullptr);

/// The two-host network every experiment runs on.
struct TestbedConfig {
    Transport transport = Transport::Quic;
    rt::LinkConfig link;
    uint64_t seed = 1;
    size_t initial_flows = 0;
    std::optional<std::filesystem::path> session_file;
    Duration probe_interval = std::chrono::seconds(5);
    /// Directory for credentials; a temporary one when empty.
    std::filesystem::path workdir;
};

class Testbed {
  public:
    static const uint32_t kSwitchIp;
    static const uint32_t kControllerIp;
    static constexpr uint16_t kQuicPort = 4433;

    /// Throws LaunchFailure.
    explicit Testbed(TestbedConfig cfg);
    ~Testbed();

    /// Starts capturing every inter-host packet.
    void start_capture();
    void stop_capture();
    const pcap::Capture& capture() const { return capture_; }
    KeyLog& keys() { return keys_; }
    /// Runs until both daemons are connected end to end. Throws LaunchFailure.
    void wait_ready(Duration limit = std::chrono::seconds(30));

    rt::SimRuntime& rt() { return *rt_; }
    endpoints::SwitchEmulator& sw() { return *sw_; }
    endpoints::ControllerEmulator& ctl() { return *ctl_; }
    agent::AgentClient* client() { return client_.get(); }
    agent::AgentServer* server() { return server_.get(); }
    const TestbedConfig& config() const { return cfg_; }
    Filter filter() const { return {{kSwitchIp, 0}, {kControllerIp, 0}}; }
    /// Wire bytes sent by both QUIC endpoints, IP and UDP headers included.
    uint64_t quic_wire_counter();

  private:
    TestbedConfig cfg_;
    std::filesystem::path credentials_dir_;
    bool own_dir_ = false;
    std::unique_ptr<rt::SimRuntime> rt_;
    KeyLog keys_;
    pcap::Capture capture_;
    bool capturing_ = false;
    std::unique_ptr<agent::AgentServer> server_;
    std::unique_ptr<agent::AgentClient> client_;
    std::unique_ptr<endpoints::ControllerEmulator> ctl_;
    std::unique_ptr<endpoints::SwitchEmulator> sw_;
    uint64_t wire_retired_ = 0;
};

/// Runs one FlowInstall, QueueConfig or StatsPoll experiment. Throws
/// LaunchFailure, AccountingGap.
TrafficReport run_experiment(const ExperimentConfig& cfg);

struct Quartiles {
    double q1 = 0;
    double median = 0;
    double q3 = 0;
};
Quartiles quartiles(std::vector<double> values);

struct MigrationTrace {
    Transport transport = Transport::Quic;
    uint64_t file_bytes = 0;
    /// (seconds since transfer start, cumulative payload of the current transfer)
    std::vector<std::pair<double, uint64_t>> series;
    std::optional<double> break_time;
    std::optional<double> resume_time;
    int restarts = 0;
    bool completed = false;
    bool failed = false;
    std::string failure;
    double duration = 0;
    /// Payload moved switch to controller, from the capture.
    uint64_t payload_moved = 0;
    TrafficReport report;
    // QUIC only: OpenFlow stream id and receive offset around the break.
    std::optional<uint64_t> stream_id_before;
    std::optional<uint64_t> stream_id_after;
    std::optional<uint64_t> offset_before;
    std::optional<uint64_t> offset_after;
    /// Lowest offset the client sent on the new path.
    std::optional<uint64_t> resend_from;
    uint64_t connections_accepted = 0;

    double moved_ratio() const { return file_bytes ? double(payload_moved) / double(file_bytes) : 0; }
    bool non_decreasing() const;
    nlohmann::json to_json() const;
};

/// Flows needed for a stats reply of about file_bytes.
size_t flows_for_bytes(uint64_t file_bytes);
/// Total size of the stats reply for n flows.
uint64_t reply_bytes(size_t n_flows);

/// Stats-driven bulk transfer, optionally broken part-way. Throws
/// LaunchFailure; ResumeFailure is reported in the trace.
MigrationTrace run_migration(const ExperimentConfig& cfg);

/// When the client's first application byte left, relative to the
/// server's first packet.
struct HandshakeTiming {
    std::optional<double> first_client_data;  // capture timestamp, seconds
    std::optional<double> first_server_packet;
    bool zero_rtt = false;  // a 0-RTT packet carried STREAM data

    bool data_before_reply() const {
        return first_client_data && (!first_server_packet || *first_client_data < *first_server_packet);
    }
};

/// Client is the endpoint at client_ip; everything else is the server.
HandshakeTiming handshake_timing(const pcap::Capture& capture, const KeyLog& keys, uint32_t client_ip);

struct ResumptionResult {
    HandshakeTiming first;
    HandshakeTiming second;
    bool second_resumed = false;
};

/// Connects twice with the same session file and server credentials,
/// capturing each connection from its first packet. Throws LaunchFailure.
ResumptionResult run_resumption(const rt::LinkConfig& link, uint64_t seed, const std::filesystem::path& workdir);

/// Message identity check across an agent pair with bare datagram daemons
/// on both ends. Works on any runtime; simulated hosts must exist.
struct IdentityConfig {
    uint32_t client_ip = 0x7f000001;  // agent client and switch daemons
    uint32_t server_ip = 0x7f000001;  // agent server
    uint32_t daemon_ip = 0x7f000002;  // controller daemons
    uint16_t openflow_port = mux::kOpenFlowPort;
    uint16_t ovsdb_port = mux::kOvsdbPort;
    size_t messages = 10'000;
    size_t max_size = 1400;
    uint64_t seed = 1;
    /// Pacing: this many messages per tick.
    size_t batch = 50;
    Duration tick = std::chrono::milliseconds(1);
    Duration limit = std::chrono::seconds(60);
    std::filesystem::path key_file;
    std::filesystem::path cert_file;
};

struct IdentityDirection {
    uint64_t sent = 0;
    uint64_t received = 0;
    uint64_t lost = 0;
    uint64_t duplicated = 0;
    uint64_t reordered = 0;
    uint64_t cross = 0;  // delivered to the other protocol's daemon
    uint64_t corrupted = 0;

    bool clean() const { return sent == received && lost + duplicated + reordered + cross + corrupted == 0; }
};

struct IdentityResult {
    IdentityDirection openflow_up;  // switch daemon to controller daemon
    IdentityDirection ovsdb_up;
    IdentityDirection openflow_down;  // echoed back
    IdentityDirection ovsdb_down;
    std::set<uint64_t> openflow_streams;  // ids that carried each protocol
    std::set<uint64_t> ovsdb_streams;
    bool finished = false;

    /// OpenFlow only on ids = 0 mod 3, OVSDB only on even ids != 0 mod 3.
    bool ids_follow_policy() const;
    bool ok() const;
};

IdentityResult run_identity(rt::Runtime& rt, const IdentityConfig& cfg);

struct ComparisonRow {
    std::string scenario;
    uint64_t tcp_bytes = 0;
    uint64_t quic_bytes = 0;
    double reduction = 0;  // percent, on overhead bytes
    uint64_t tcp_wire = 0;
    uint64_t quic_wire = 0;
    double wire_reduction = 0;
};

/// (tcp - quic) / tcp * 100.
double reduction_percent(double tcp, double quic);
/// Pairs reports by scenario. Throws MissingPair when a scenario lacks a
/// TCP or QUIC report.
std::vector<ComparisonRow> compare(const std::vector<TrafficReport>& reports);
nlohmann::json to_json(const std::vector<ComparisonRow>& rows);
std::string to_text(const std::vector<ComparisonRow>& rows);

}  // namespace quicsb::harness
