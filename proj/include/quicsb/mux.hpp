#pragma once

// Stream-id allocation and classification: OpenFlow rides client-initiated
// (even) ids divisible by 3, OVSDB rides the remaining even ids.

#include <cstdint>
#include <map>
#include <optional>

#include "quicsb/codec.hpp"

namespace quicsb::mux {

using codec::Protocol;

inline constexpr uint64_t kMaxStreamId = (uint64_t{1} << 62) - 1;
inline constexpr uint16_t kOpenFlowPort = 6653;
inline constexpr uint16_t kOvsdbPort = 6640;

/// Logical stream id. Always even and non-zero.
class StreamLabel {
  public:
    /// Throws OddStreamId for odd ids and InvalidParams for 0 or > 2^62-1.
    explicit StreamLabel(uint64_t id);

    uint64_t id() const { return id_; }
    auto operator<=>(const StreamLabel&) const = default;

  private:
    uint64_t id_;
};

class MuxPolicy {
  public:
    MuxPolicy() = default;
    /// Resume allocation from explicit counter positions (the k-th id of each
    /// sequence); mostly useful to exercise exhaustion.
    MuxPolicy(uint64_t openflow_issued, uint64_t ovsdb_issued)
        : openflow_issued_(openflow_issued), ovsdb_issued_(ovsdb_issued) {}

    /// 6, 12, 18, ...
    StreamLabel generate_stream_id_divisible_by_3();
    /// 2, 4, 8, 10, 14, 16, ...
    StreamLabel generate_normal_stream_id();
    StreamLabel next_for(Protocol p) {
        return p == Protocol::OpenFlow ? generate_stream_id_divisible_by_3() : generate_normal_stream_id();
    }

  private:
    uint64_t openflow_issued_ = 0;
    uint64_t ovsdb_issued_ = 0;
};

/// Throws OddStreamId for odd ids.
Protocol classify(uint64_t id);
inline Protocol classify(StreamLabel label) { return classify(label.id()); }

/// Bijective daemon-port <-> stream map.
class ConnMap {
  public:
    explicit ConnMap(uint16_t openflow_port = kOpenFlowPort, uint16_t ovsdb_port = kOvsdbPort)
        : openflow_port_(openflow_port), ovsdb_port_(ovsdb_port) {}

    /// Binds port<->label. Throws PolicyViolation when the port is unknown or
    /// the label's class does not match the port. Rebinding a port returns
    /// the id it was previously bound to.
    std::optional<StreamLabel> bind(uint16_t port, StreamLabel label);

    std::optional<StreamLabel> lookup(uint16_t port) const;
    std::optional<uint16_t> lookup_port(StreamLabel label) const;
    size_t size() const { return by_port_.size(); }

    uint16_t openflow_port() const { return openflow_port_; }
    uint16_t ovsdb_port() const { return ovsdb_port_; }
    uint16_t port_for(Protocol p) const { return p == Protocol::OpenFlow ? openflow_port_ : ovsdb_port_; }

  private:
    uint16_t openflow_port_;
    uint16_t ovsdb_port_;
    std::map<uint16_t, StreamLabel> by_port_;
    std::map<StreamLabel, uint16_t> by_label_;
};

}  // namespace quicsb::mux
