#include "quicsb/mux.hpp"

namespace quicsb::mux {

StreamLabel::StreamLabel(uint64_t id) : id_(id) {
    if (id == 0 || id > kMaxStreamId) throw Error(Errc::InvalidParams, "stream label out of range");
    if (id % 2 != 0) throw Error(Errc::OddStreamId, "odd stream id " + std::to_string(id));
}

StreamLabel MuxPolicy::generate_stream_id_divisible_by_3() {
    // k-th id (1-based) is 6k.
    uint64_t k = openflow_issued_ + 1;
    if (k > kMaxStreamId / 6) throw Error(Errc::IdSpaceExhausted, "OpenFlow stream ids exhausted");
    openflow_issued_ = k;
    return StreamLabel(6 * k);
}

StreamLabel MuxPolicy::generate_normal_stream_id() {
    // Even ids 2m with m not divisible by 3: m = 1, 2, 4, 5, 7, 8, ...
    uint64_t n = ovsdb_issued_;
    uint64_t m = 3 * (n / 2) + (n % 2) + 1;
    if (m > kMaxStreamId / 2) throw Error(Errc::IdSpaceExhausted, "OVSDB stream ids exhausted");
    ovsdb_issued_ = n + 1;
    return StreamLabel(2 * m);
}

Protocol classify(uint64_t id) {
    if (id % 2 != 0) throw Error(Errc::OddStreamId, "odd (server-initiated) stream id " + std::to_string(id));
    return id % 3 == 0 ? Protocol::OpenFlow : Protocol::Ovsdb;
}

std::optional<StreamLabel> ConnMap::bind(uint16_t port, StreamLabel label) {
    if (port != openflow_port_ && port != ovsdb_port_) {
        throw Error(Errc::PolicyViolation, "port " + std::to_string(port) + " is not a daemon port");
    }
    Protocol want = port == openflow_port_ ? Protocol::OpenFlow : Protocol::Ovsdb;
    if (classify(label) != want) {
        throw Error(Errc::PolicyViolation,
                    "stream " + std::to_string(label.id()) + " cannot carry traffic for port " + std::to_string(port));
    }
    std::optional<StreamLabel> prior;
    if (auto it = by_port_.find(port); it != by_port_.end()) {
        if (it->second == label) return std::nullopt;
        prior = it->second;
        by_label_.erase(it->second);
    }
    // A label moving ports cannot happen given the class check, but keep the
    // inverse map exact regardless.
    if (auto it = by_label_.find(label); it != by_label_.end()) by_port_.erase(it->second);
    by_port_.insert_or_assign(port, label);
    by_label_.insert_or_assign(label, port);
    return prior;
}

std::optional<StreamLabel> ConnMap::lookup(uint16_t port) const {
    auto it = by_port_.find(port);
    if (it == by_port_.end()) return std::nullopt;
    return it->second;
}

std::optional<uint16_t> ConnMap::lookup_port(StreamLabel label) const {
    auto it = by_label_.find(label);
    if (it == by_label_.end()) return std::nullopt;
    return it->second;
}

}  // namespace quicsb::mux
