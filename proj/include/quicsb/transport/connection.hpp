#pragma once

// Sans-IO QUIC-style connection. The owner feeds datagrams in with
// receive(), pulls datagrams out with poll_transmit() and drives timers via
// next_timeout()/handle_timeout().

#include <array>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <boost/icl/interval_set.hpp>

#include "quicsb/bytes.hpp"
#include "quicsb/net.hpp"
#include "quicsb/transport/crypto.hpp"
#include "quicsb/transport/packet.hpp"
#include "quicsb/transport/session.hpp"

namespace quicsb::transport {

using namespace std::chrono_literals;

enum class Role { Client, Server };

enum class HandshakePhase { InitialKeyAgreement, InitialDataExchange, KeyAgreement, DataExchange };

enum class Direction { Encrypt, Decrypt };

struct PathInfo {
    SocketAddr local;
    SocketAddr remote;
    bool validated = false;
};

struct ConnectionConfig {
    std::string server_name = "quicsb";
    Duration idle_timeout = 30s;
    Duration handshake_timeout = 10s;
    Duration max_ack_delay = 25ms;
    uint64_t ack_eliciting_threshold = 2;
    Duration initial_rtt = 333ms;
    /// 1500-byte MTU minus IPv4 and UDP headers.
    size_t max_udp_payload = 1472;
    /// Path validation gives up after max(3 * smoothed RTT, this floor).
    Duration path_validation_floor = 1s;
    /// Unsent bytes a connection will buffer before writers see FlowControlBlocked.
    size_t max_buffered = 64u << 20;
    std::chrono::seconds ticket_lifetime{7 * 24 * 3600};
    /// Wall clock used to stamp and check tickets.
    std::function<int64_t()> wall_clock;
};

/// Server-wide state shared by every accepted connection.
struct ServerContext {
    crypto::Credentials credentials;
    Bytes ticket_secret;

    /// The ticket key is derived from the private key so tickets survive
    /// server restarts with the same credentials.
    static std::shared_ptr<ServerContext> load(const std::filesystem::path& key_pem,
                                               const std::filesystem::path& cert_pem);
};

namespace event {
struct HandshakeCompleted {
    bool resumed = false;
    bool early_data_accepted = false;
};
struct StreamOpened {
    uint64_t id = 0;
};
struct StreamReadable {
    uint64_t id = 0;
};
struct NewTicket {
    SessionTicket ticket;
};
struct TicketRejected {};
struct PathValidated {
    PathInfo path;
};
struct PathValidationFailed {
    PathInfo path;
};
struct Closed {
    Errc reason = Errc::Closed;
    std::string detail;
};
}  // namespace event

using Event = std::variant<event::HandshakeCompleted, event::StreamOpened, event::StreamReadable, event::NewTicket,
                           event::TicketRejected, event::PathValidated, event::PathValidationFailed, event::Closed>;

struct Datagram {
    SocketAddr from;
    SocketAddr to;
    Bytes data;
};

struct ConnectionStats {
    uint64_t datagrams_sent = 0;
    uint64_t datagrams_received = 0;
    uint64_t bytes_sent = 0;
    uint64_t bytes_received = 0;
    uint64_t packets_sent = 0;
    uint64_t packets_received = 0;
    uint64_t packets_lost = 0;
    uint64_t short_packets_sent = 0;
    uint64_t stream_frames_sent = 0;
    uint64_t stream_bytes_sent = 0;
    uint64_t stream_bytes_retransmitted = 0;
    uint64_t duplicates_dropped = 0;
    uint64_t auth_failures = 0;
    uint64_t undecryptable = 0;
    uint64_t zero_rtt_packets_sent = 0;
    std::optional<TimePoint> started_at;
    std::optional<TimePoint> handshake_completed_at;
    std::optional<TimePoint> first_stream_data_sent_at;
};

/// Key log line sink: (label, connection id hex, secret hex).
using KeyLogger = std::function<void(std::string_view label, const Bytes& cid, const Bytes& secret)>;

class Connection {
  public:
    /// Starts a client connection. With a usable ticket the ClientHello
    /// offers resumption and stream data written before the handshake
    /// finishes travels in 0-RTT packets.
    static std::unique_ptr<Connection> connect(const ConnectionConfig& cfg, SocketAddr local, SocketAddr remote,
                                               const std::optional<SessionTicket>& ticket, TimePoint now,
                                               KeyLogger keylog = {});

    /// Creates a server connection for a client Initial packet addressed to
    /// original_dcid.
    static std::unique_ptr<Connection> accept(const ConnectionConfig& cfg, std::shared_ptr<const ServerContext> ctx,
                                              SocketAddr local, SocketAddr remote, const Bytes& original_dcid,
                                              const Bytes& client_scid, TimePoint now, KeyLogger keylog = {});

    ~Connection();
    Connection(const Connection&) = delete;
    Connection& operator=(const Connection&) = delete;

    void receive(ByteView datagram, SocketAddr from, SocketAddr to, TimePoint now);
    std::optional<Datagram> poll_transmit(TimePoint now);
    std::optional<TimePoint> next_timeout() const;
    void handle_timeout(TimePoint now);
    std::optional<Event> poll_event();

    /// Opens a locally initiated bidirectional stream and returns its id.
    uint64_t open_stream();
    /// Opens a locally initiated stream with an explicit id. Even ids belong
    /// to the client and odd ids to the server; all streams are
    /// bidirectional. Throws ProtocolViolation for the peer's parity or an id
    /// already in use.
    void open_stream(uint64_t id);
    bool has_stream(uint64_t id) const { return streams_.count(id) != 0; }
    /// Buffers data for sending. Throws FlowControlBlocked when the
    /// connection already buffers max_buffered unsent bytes, Closed after
    /// close, UnknownStream for an id that is not open.
    void stream_write(uint64_t id, ByteView data, bool fin = false);
    /// Returns and consumes the contiguous bytes received on a stream.
    Bytes stream_read(uint64_t id);
    bool stream_finished(uint64_t id) const;
    /// Bytes the writer may still buffer before FlowControlBlocked.
    size_t writable_bytes() const;
    /// Unsent plus unacknowledged bytes across all streams.
    size_t buffered_bytes() const;
    /// Offset of the next byte the local side will write on a stream.
    uint64_t stream_send_offset(uint64_t id) const;
    /// Bytes delivered to the reader so far on a stream.
    uint64_t stream_recv_offset(uint64_t id) const;
    std::vector<uint64_t> streams() const;

    /// Moves the client to a new local endpoint and starts path validation.
    /// Throws HandshakeIncomplete before DataExchange.
    void migrate(SocketAddr new_local, TimePoint now);
    const PathInfo& path() const { return path_; }
    bool path_validation_pending() const { return challenge_.has_value(); }

    void close(Errc reason, const std::string& detail, TimePoint now);
    bool is_closed() const { return state_ == State::Closed; }
    bool is_established() const { return handshake_complete_; }
    bool is_resumed() const { return resumed_; }
    bool early_data_accepted() const { return early_data_accepted_; }

    HandshakePhase phase() const { return phase_; }
    /// Encrypts with the local write key of a phase or decrypts with the
    /// peer's. Output of Encrypt is an 8-byte sequence number followed by
    /// ciphertext and tag; Decrypt takes the same layout.
    Bytes crypt_message(Direction dir, HandshakePhase phase, ByteView data);
    /// Next loss-recovery deadline. Throws Closed on a closed connection.
    TimePoint schedule_retransmit() const;

    Role role() const { return role_; }
    const Bytes& local_cid() const { return local_cid_; }
    const Bytes& original_dcid() const { return original_dcid_; }
    const ConnectionStats& stats() const { return stats_; }
    Duration smoothed_rtt() const { return smoothed_rtt_; }
    size_t congestion_window() const { return cwnd_; }
    size_t bytes_in_flight() const { return bytes_in_flight_; }

  private:
    enum class State { Handshaking, Established, Closing, Draining, Closed };

    struct StreamRange {
        uint64_t id;
        uint64_t offset;
        uint64_t length;
        bool fin;
    };
    struct CryptoRange {
        uint64_t offset;
        uint64_t length;
    };
    struct HandshakeDoneSent {};
    struct ChallengeSent {};
    using SentFrame = std::variant<StreamRange, CryptoRange, HandshakeDoneSent, ChallengeSent>;

    struct SentPacket {
        TimePoint time_sent;
        size_t size = 0;
        bool ack_eliciting = false;
        bool in_flight = false;
        bool zero_rtt = false;
        std::vector<SentFrame> frames;
    };

    using RangeSet = boost::icl::interval_set<uint64_t>;

    /// Outgoing byte stream with selective acknowledgement and retransmission.
    struct SendBuffer {
        uint64_t base = 0;      // offset of data[0]
        uint64_t acked_to = 0;  // everything below is acknowledged
        Bytes data;
        uint64_t written = 0;
        uint64_t sent = 0;
        RangeSet acked;
        RangeSet retransmit;
        bool fin = false;
        bool fin_sent = false;
        bool fin_acked = false;
        bool fin_lost = false;

        bool has_pending() const {
            return !retransmit.empty() || sent < written || (fin && (!fin_sent || fin_lost) && !fin_acked);
        }
        void on_acked(uint64_t offset, uint64_t length);
        void on_lost(uint64_t offset, uint64_t length);
        ByteView view(uint64_t offset, uint64_t length) const;
        size_t unacked() const { return static_cast<size_t>(written - acked_to); }
    };

    /// Reassembles out-of-order data; delivers each byte exactly once.
    struct RecvBuffer {
        uint64_t delivered = 0;  // consumed by the reader
        uint64_t contiguous = 0; // end of contiguous received data
        Bytes ready;
        std::map<uint64_t, Bytes> pending;
        std::optional<uint64_t> fin_at;

        /// Returns true when new contiguous bytes became available.
        bool insert(uint64_t offset, ByteView data);
    };

    struct Stream {
        SendBuffer send;
        RecvBuffer recv;
    };

    struct PacketSpace {
        uint64_t next_pn = 0;
        std::map<uint64_t, SentPacket> sent;
        std::optional<uint64_t> largest_acked;
        std::optional<TimePoint> loss_time;
        std::optional<TimePoint> last_ack_eliciting_sent;
        size_t eliciting_outstanding = 0;

        RangeSet received;
        std::optional<uint64_t> largest_received;
        TimePoint largest_received_time{};
        uint64_t unacked_eliciting = 0;
        bool ack_needed = false;
        std::optional<TimePoint> ack_deadline;

        SendBuffer crypto_send;
        RecvBuffer crypto_recv;
        std::optional<crypto::Aead> seal;
        std::optional<crypto::Aead> open;
        bool discarded = false;
        int probes = 0;
    };

    Connection(Role role, const ConnectionConfig& cfg, TimePoint now, KeyLogger keylog);

    // Handshake
    void start_client(const std::optional<SessionTicket>& ticket, TimePoint now);
    void on_crypto_data(Space space, TimePoint now);
    void handle_handshake_message(Space space, uint8_t type, ByteView body, ByteView whole, TimePoint now);
    void on_client_hello(ByteView body, ByteView whole, TimePoint now);
    void on_server_hello(ByteView body, ByteView whole, TimePoint now);
    void on_encrypted_extensions(ByteView body, ByteView whole);
    void on_certificate(ByteView body, ByteView whole);
    void on_certificate_verify(ByteView body, ByteView whole);
    void on_finished(ByteView body, ByteView whole, TimePoint now);
    void on_new_session_ticket(ByteView body);
    void send_handshake_message(Space space, uint8_t type, ByteView body, bool add_to_transcript = true);
    Bytes transcript_hash() const;
    Bytes encode_transport_params() const;
    void decode_transport_params(ByteView b);
    void install_keys(Space space, const Bytes& write_secret, const Bytes& read_secret, HandshakePhase phase);
    void complete_handshake(TimePoint now);
    void discard_space(Space space);
    void reject_zero_rtt();
    void advance_phase(HandshakePhase p);

    // Receive path
    void process_packet(const RawPacket& pkt, SocketAddr from, TimePoint now, bool& probing_only);
    void handle_frames(Space space, const std::vector<Frame>& frames, SocketAddr from, TimePoint now);
    void on_ack(Space space, const frame::Ack& ack, TimePoint now);
    void on_stream_frame(const frame::Stream& f);

    // Recovery
    void detect_lost(Space space, TimePoint now);
    void on_packet_lost(Space space, uint64_t pn, SentPacket& p);
    void on_packet_acked(Space space, SentPacket& p);
    void update_rtt(Duration latest, Duration ack_delay, Space space);
    Duration pto_base(Space space) const;
    std::optional<std::pair<TimePoint, Space>> loss_timer() const;
    std::optional<std::pair<TimePoint, Space>> pto_timer() const;
    void on_pto(Space space, TimePoint now);
    void on_congestion_event(TimePoint sent_time, TimePoint now);

    // Send path
    bool space_ready(Space s) const;
    bool ack_due(const PacketSpace& ps, TimePoint now) const;
    void write_ack_frame(PacketSpace& ps, ByteWriter& w, TimePoint now);
    size_t fill_stream_frames(ByteWriter& w, size_t room, SentPacket& sp, bool& any_last);
    void seal_packet(Space space, PacketType type, uint64_t pn, Bytes& dgram, ByteView plain);
    void record_sent(Space space, uint64_t pn, SentPacket sp, TimePoint now);
    void emit(Event e) { events_.push_back(std::move(e)); }
    void enter_closed(Errc reason, const std::string& detail);

    Stream& stream_for_write(uint64_t id);

    Role role_;
    ConnectionConfig cfg_;
    KeyLogger keylog_;
    State state_ = State::Handshaking;
    HandshakePhase phase_ = HandshakePhase::InitialKeyAgreement;

    Bytes local_cid_;
    Bytes remote_cid_;
    Bytes original_dcid_;
    PathInfo path_;

    std::array<PacketSpace, 3> spaces_;
    std::optional<crypto::Aead> zero_rtt_;
    std::array<std::optional<std::pair<crypto::Aead, crypto::Aead>>, 4> phase_keys_;  // (write, read)
    uint64_t crypt_seq_ = 0;

    // Handshake state
    std::shared_ptr<const ServerContext> server_ctx_;
    crypto::X25519 ecdhe_;
    Bytes transcript_;
    Bytes early_secret_;
    Bytes handshake_secret_;
    Bytes master_secret_;
    Bytes resumption_master_;
    Bytes client_hs_secret_, server_hs_secret_;
    Bytes client_ap_secret_, server_ap_secret_;
    Bytes peer_certificate_;
    std::optional<ResumptionSecret> offered_psk_;
    std::optional<SessionTicket> offered_ticket_;
    Bytes peer_transport_params_;
    bool psk_accepted_ = false;
    bool early_data_offered_ = false;
    bool early_data_accepted_ = false;
    bool resumed_ = false;
    bool handshake_complete_ = false;
    bool handshake_confirmed_ = false;
    bool handshake_done_pending_ = false;
    Bytes pending_ticket_;
    Duration peer_max_ack_delay_ = 25ms;

    // Streams
    std::map<uint64_t, Stream> streams_;
    uint64_t next_local_stream_ = 0;
    size_t buffered_unsent_ = 0;
    uint64_t stream_cursor_ = 0;

    // Recovery and congestion control
    Duration smoothed_rtt_;
    Duration rttvar_;
    Duration min_rtt_ = Duration::max();
    Duration latest_rtt_{};
    bool have_rtt_ = false;
    int pto_count_ = 0;
    size_t cwnd_;
    size_t ssthresh_ = SIZE_MAX;
    size_t bytes_in_flight_ = 0;
    std::optional<TimePoint> recovery_start_;

    // Address validation (server)
    bool address_validated_ = false;
    uint64_t amp_received_ = 0;
    uint64_t amp_sent_ = 0;

    // Path validation
    std::optional<std::array<uint8_t, 8>> challenge_;
    bool challenge_pending_send_ = false;
    std::optional<TimePoint> challenge_deadline_;
    std::deque<std::pair<std::array<uint8_t, 8>, SocketAddr>> responses_;

    // Timers
    TimePoint created_at_;
    TimePoint last_activity_;
    std::optional<TimePoint> close_deadline_;
    bool close_pending_send_ = false;
    frame::ConnectionClose close_frame_;
    Errc close_reason_ = Errc::Closed;

    std::vector<std::pair<Bytes, SocketAddr>> undecryptable_;
    std::deque<Event> events_;
    ConnectionStats stats_;
};

std::string_view to_string(HandshakePhase p);

}  // namespace quicsb::transport
