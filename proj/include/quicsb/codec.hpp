#pragma once

// OpenFlow-style and OVSDB-style control messages: framing, parsing and
// size-controlled synthesis of the workloads the harness drives.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quicsb/bytes.hpp"

namespace quicsb::codec {

enum class Protocol : uint8_t { OpenFlow, Ovsdb };

std::string_view to_string(Protocol p);

struct ControlMessage {
    Protocol protocol = Protocol::OpenFlow;
    Bytes payload;
    std::optional<uint32_t> xid;  // OpenFlow only

    size_t size() const { return payload.size(); }
    bool operator==(const ControlMessage&) const = default;
};

inline constexpr uint8_t kOpenFlow13 = 0x04;
inline constexpr size_t kOpenFlowHeaderSize = 8;
inline constexpr size_t kOpenFlowMaxLength = 65535;

namespace ofpt {
inline constexpr uint8_t Hello = 0;
inline constexpr uint8_t EchoRequest = 2;
inline constexpr uint8_t EchoReply = 3;
inline constexpr uint8_t FlowMod = 14;
inline constexpr uint8_t MultipartRequest = 18;
inline constexpr uint8_t MultipartReply = 19;
inline constexpr uint8_t BarrierRequest = 20;
inline constexpr uint8_t BarrierReply = 21;
}  // namespace ofpt

struct OpenFlowHeader {
    uint8_t version = kOpenFlow13;
    uint8_t msg_type = 0;
    uint16_t length = kOpenFlowHeaderSize;
    uint32_t xid = 0;

    bool operator==(const OpenFlowHeader&) const = default;
};

/// Throws BodyTooLarge when 8 + body exceeds the 16-bit length field.
ControlMessage encode_openflow(uint8_t msg_type, uint32_t xid, ByteView body,
                               uint8_t version = kOpenFlow13);

/// Reads the first 8 bytes big-endian. Truncated below 8 bytes, BadLength
/// when the length field is < 8.
OpenFlowHeader decode_openflow_header(ByteView buf);

// Size functions of the synthetic workload. These are fixed so that byte
// counts are a pure function of the inputs.
inline constexpr size_t kFlowModBase = 56;
inline constexpr size_t kFlowModPerMatch = 8;
inline constexpr size_t kFlowModPerAction = 16;
inline constexpr size_t kMultipartHeader = 16;
inline constexpr size_t kFlowStatsRecord = 104;
inline constexpr uint16_t kMultipartFlowStats = 1;
inline constexpr uint16_t kMultipartReplyMore = 1;

size_t flow_mod_size(size_t match_fields, size_t action_count);
size_t multipart_reply_size(size_t n_flows);

ControlMessage synth_flow_mod(size_t match_fields, size_t action_count, uint32_t xid);

enum class MultipartKind { Request, Reply };

/// Requests are a single 16-byte message. Replies carry one 104-byte record
/// per flow; when the logical size exceeds 65535 bytes the reply is split
/// into several messages, all but the last flagged REPLY_MORE.
std::vector<ControlMessage> synth_multipart(MultipartKind kind, size_t n_flows, uint32_t xid = 0);

/// Number of flow records carried by a MULTIPART_REPLY message.
size_t multipart_record_count(const ControlMessage& reply);

// OVSDB (JSON-RPC 1.0, compact serialization with sorted keys).

struct QueueRates {
    uint64_t min_rate = 0;
    uint64_t max_rate = 0;
    bool operator==(const QueueRates&) const = default;
};

struct QueueTransact {
    uint64_t request_id = 0;
    uint64_t queue_id = 0;
    QueueRates rates;
    bool operator==(const QueueTransact&) const = default;
};

ControlMessage make_ovsdb(const nlohmann::json& rpc);

/// Parses and checks JSON-RPC 1.0 shape (request, notification or response).
nlohmann::json parse_ovsdb(ByteView payload);

ControlMessage synth_queue_transact(uint64_t queue_id, QueueRates rates);
ControlMessage synth_queue_transact(const QueueTransact& t);
QueueTransact parse_queue_transact(const ControlMessage& msg);

/// The switch's "update" notification after applying a queue transact; the
/// monitor value echoes the request id so replies can be matched.
ControlMessage synth_queue_update(const QueueTransact& applied);
std::optional<uint64_t> update_request_id(const nlohmann::json& rpc);

ControlMessage synth_ovsdb_echo(const std::string& id);
ControlMessage synth_ovsdb_echo_reply(const nlohmann::json& request);

/// Splits an OpenFlow byte stream on header length fields.
class OpenFlowDelimiter {
  public:
    /// Returns every message completed by `data`. Throws BadLength when the
    /// stream carries a header with length < 8.
    std::vector<Bytes> feed(ByteView data);
    size_t buffered() const { return buf_.size() - start_; }

  private:
    Bytes buf_;
    size_t start_ = 0;
};

/// Splits a byte stream of concatenated JSON texts at top-level object
/// boundaries.
class JsonDelimiter {
  public:
    std::vector<Bytes> feed(ByteView data);
    size_t buffered() const { return current_.size(); }

  private:
    Bytes current_;
    int depth_ = 0;
    bool in_string_ = false;
    bool escape_ = false;
};

}  // namespace quicsb::codec
