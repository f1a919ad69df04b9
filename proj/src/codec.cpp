#include "quicsb/codec.hpp"

#include <algorithm>

namespace quicsb::codec {

using nlohmann::json;

std::string_view to_string(Protocol p) { return p == Protocol::OpenFlow ? "openflow" : "ovsdb"; }

ControlMessage encode_openflow(uint8_t msg_type, uint32_t xid, ByteView body, uint8_t version) {
    if (body.size() + kOpenFlowHeaderSize > kOpenFlowMaxLength) {
        throw Error(Errc::BodyTooLarge, "OpenFlow message exceeds 65535 bytes");
    }
    ControlMessage msg{Protocol::OpenFlow, {}, xid};
    msg.payload.reserve(kOpenFlowHeaderSize + body.size());
    ByteWriter w(msg.payload);
    w.u8(version);
    w.u8(msg_type);
    w.u16(static_cast<uint16_t>(kOpenFlowHeaderSize + body.size()));
    w.u32(xid);
    w.bytes(body);
    return msg;
}

OpenFlowHeader decode_openflow_header(ByteView buf) {
    if (buf.size() < kOpenFlowHeaderSize) throw Error(Errc::Truncated, "OpenFlow header needs 8 bytes");
    ByteReader r(buf);
    OpenFlowHeader h;
    h.version = r.u8();
    h.msg_type = r.u8();
    h.length = r.u16();
    h.xid = r.u32();
    if (h.length < kOpenFlowHeaderSize) throw Error(Errc::BadLength, "OpenFlow length field below 8");
    return h;
}

size_t flow_mod_size(size_t match_fields, size_t action_count) {
    return kFlowModBase + kFlowModPerMatch * match_fields + kFlowModPerAction * action_count;
}

size_t multipart_reply_size(size_t n_flows) { return kMultipartHeader + kFlowStatsRecord * n_flows; }

ControlMessage synth_flow_mod(size_t match_fields, size_t action_count, uint32_t xid) {
    // Guard the arithmetic before building anything large.
    if (match_fields > kOpenFlowMaxLength || action_count > kOpenFlowMaxLength ||
        flow_mod_size(match_fields, action_count) > kOpenFlowMaxLength) {
        throw Error(Errc::BodyTooLarge, "FLOW_MOD exceeds 65535 bytes");
    }
    Bytes body;
    body.reserve(flow_mod_size(match_fields, action_count) - kOpenFlowHeaderSize);
    ByteWriter w(body);
    w.u64(0x51534200u + match_fields);  // cookie
    w.u64(0);                           // cookie mask
    w.u8(0);                            // table
    w.u8(0);                            // OFPFC_ADD
    w.u16(0);                           // idle timeout
    w.u16(0);                           // hard timeout
    w.u16(0x8000);                      // priority
    w.u32(0xffffffff);                  // OFP_NO_BUFFER
    w.u32(0xffffffff);                  // out port any
    w.u32(0xffffffff);                  // out group any
    w.u16(0);                           // flags
    w.zeros(2);
    // ofp_match header: OXM type, length covering the fields.
    w.u16(1);
    w.u16(static_cast<uint16_t>(4 + kFlowModPerMatch * match_fields));
    w.zeros(4);
    for (size_t i = 0; i < match_fields; ++i) {
        w.u16(0x8000);                                    // OFPXMC_OPENFLOW_BASIC
        w.u8(static_cast<uint8_t>((i % 40) << 1));        // field, no mask
        w.u8(4);
        w.u32(static_cast<uint32_t>(i + 1));
    }
    for (size_t i = 0; i < action_count; ++i) {
        w.u16(0);   // OFPAT_OUTPUT
        w.u16(16);
        w.u32(static_cast<uint32_t>(i + 1));
        w.u16(0xffff);
        w.zeros(6);
    }
    return encode_openflow(ofpt::FlowMod, xid, body);
}

namespace {

void write_flow_record(ByteWriter& w, size_t index) {
    const auto i = static_cast<uint64_t>(index);
    const size_t start = w.size();
    w.u16(static_cast<uint16_t>(kFlowStatsRecord));
    w.u8(0);                // table
    w.u8(0);
    w.u32(static_cast<uint32_t>(i * 3));   // duration sec
    w.u32(0);                              // duration nsec
    w.u16(0x8000);                         // priority
    w.u16(0);                              // idle
    w.u16(0);                              // hard
    w.u16(0);                              // flags
    w.zeros(4);
    w.u64(0x51534200u + i);                // cookie
    w.u64(i * 1000);                       // packet count
    w.u64(i * 1000 * 64);                  // byte count
    w.u16(1);
    w.u16(12);
    w.u32(0x80000004);
    w.u32(static_cast<uint32_t>(i));
    w.zeros(4);
    w.u16(4);   // OFPIT_APPLY_ACTIONS
    w.u16(24);
    w.zeros(4);
    w.u16(0);
    w.u16(16);
    w.u32(static_cast<uint32_t>(i % 48 + 1));
    w.u16(0xffff);
    w.zeros(start + kFlowStatsRecord - w.size());
}

ControlMessage multipart_message(uint8_t type, uint32_t xid, uint16_t flags, size_t first, size_t count) {
    Bytes body;
    body.reserve(kMultipartHeader - kOpenFlowHeaderSize + kFlowStatsRecord * count);
    ByteWriter w(body);
    w.u16(kMultipartFlowStats);
    w.u16(flags);
    w.zeros(4);
    for (size_t i = 0; i < count; ++i) write_flow_record(w, first + i);
    return encode_openflow(type, xid, body);
}

}  // namespace

std::vector<ControlMessage> synth_multipart(MultipartKind kind, size_t n_flows, uint32_t xid) {
    if (kind == MultipartKind::Request) {
        return {multipart_message(ofpt::MultipartRequest, xid, 0, 0, 0)};
    }
    constexpr size_t per_message = (kOpenFlowMaxLength - kMultipartHeader) / kFlowStatsRecord;
    std::vector<ControlMessage> out;
    size_t sent = 0;
    do {
        size_t count = std::min(per_message, n_flows - sent);
        bool more = sent + count < n_flows;
        out.push_back(multipart_message(ofpt::MultipartReply, xid, more ? kMultipartReplyMore : 0, sent, count));
        sent += count;
    } while (sent < n_flows);
    return out;
}

size_t multipart_record_count(const ControlMessage& reply) {
    auto h = decode_openflow_header(reply.payload);
    if (h.msg_type != ofpt::MultipartReply || h.length < kMultipartHeader) {
        throw Error(Errc::ParseError, "not a MULTIPART_REPLY");
    }
    return (h.length - kMultipartHeader) / kFlowStatsRecord;
}

ControlMessage make_ovsdb(const json& rpc) {
    std::string text = rpc.dump();
    return {Protocol::Ovsdb, Bytes(text.begin(), text.end()), std::nullopt};
}

json parse_ovsdb(ByteView payload) {
    json rpc = json::parse(as_chars(payload), nullptr, false);
    if (rpc.is_discarded() || !rpc.is_object() || !rpc.contains("id")) {
        throw Error(Errc::ParseError, "not a JSON-RPC object");
    }
    bool request = rpc.contains("method") && rpc["method"].is_string() && rpc.contains("params") &&
                   rpc["params"].is_array();
    bool response = rpc.contains("result") && rpc.contains("error");
    if (!request && !response) throw Error(Errc::ParseError, "not a JSON-RPC request or response");
    return rpc;
}

namespace {

json rates_map(const QueueRates& r) {
    return json::array({"map", json::array({json::array({"max-rate", std::to_string(r.max_rate)}),
                                            json::array({"min-rate", std::to_string(r.min_rate)})})});
}

json queue_row(const QueueTransact& t) {
    return {{"other_config", rates_map(t.rates)}, {"queue_id", t.queue_id}};
}

}  // namespace

ControlMessage synth_queue_transact(uint64_t queue_id, QueueRates rates) {
    return synth_queue_transact(QueueTransact{queue_id, queue_id, rates});
}

ControlMessage synth_queue_transact(const QueueTransact& t) {
    json op = {{"op", "insert"}, {"table", "Queue"}, {"row", queue_row(t)}};
    return make_ovsdb({{"id", t.request_id}, {"method", "transact"}, {"params", json::array({"Open_vSwitch", op})}});
}

QueueTransact parse_queue_transact(const ControlMessage& msg) {
    json rpc = parse_ovsdb(msg.payload);
    try {
        if (rpc.at("method") != "transact") throw Error(Errc::ParseError, "not a transact");
        const json& row = rpc.at("params").at(1).at("row");
        QueueTransact t;
        t.request_id = rpc.at("id").get<uint64_t>();
        t.queue_id = row.at("queue_id").get<uint64_t>();
        for (const auto& kv : row.at("other_config").at(1)) {
            uint64_t v = std::stoull(kv.at(1).get<std::string>());
            if (kv.at(0) == "max-rate") t.rates.max_rate = v;
            if (kv.at(0) == "min-rate") t.rates.min_rate = v;
        }
        return t;
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, e.what());
    }
}

ControlMessage synth_queue_update(const QueueTransact& applied) {
    json table = {{"queue" + std::to_string(applied.queue_id), {{"new", queue_row(applied)}}}};
    return make_ovsdb(
        {{"id", nullptr}, {"method", "update"}, {"params", json::array({applied.request_id, {{"Queue", table}}})}});
}

std::optional<uint64_t> update_request_id(const json& rpc) {
    if (!rpc.contains("method") || rpc["method"] != "update") return std::nullopt;
    const json& params = rpc["params"];
    if (!params.is_array() || params.empty() || !params[0].is_number_unsigned()) return std::nullopt;
    return params[0].get<uint64_t>();
}

ControlMessage synth_ovsdb_echo(const std::string& id) {
    return make_ovsdb({{"id", id}, {"method", "echo"}, {"params", json::array()}});
}

ControlMessage synth_ovsdb_echo_reply(const json& request) {
    return make_ovsdb({{"id", request.at("id")}, {"error", nullptr}, {"result", request.at("params")}});
}

std::vector<Bytes> OpenFlowDelimiter::feed(ByteView data) {
    buf_.insert(buf_.end(), data.begin(), data.end());
    std::vector<Bytes> out;
    while (buf_.size() - start_ >= kOpenFlowHeaderSize) {
        ByteView pending(buf_.data() + start_, buf_.size() - start_);
        auto h = decode_openflow_header(pending);
        if (pending.size() < h.length) break;
        out.emplace_back(pending.begin(), pending.begin() + h.length);
        start_ += h.length;
    }
    if (start_ == buf_.size()) {
        buf_.clear();
        start_ = 0;
    } else if (start_ > 65536) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
        start_ = 0;
    }
    return out;
}

std::vector<Bytes> JsonDelimiter::feed(ByteView data) {
    std::vector<Bytes> out;
    for (uint8_t c : data) {
        if (depth_ == 0 && current_.empty() && c != '{') continue;  // inter-message whitespace
        current_.push_back(c);
        if (in_string_) {
            if (escape_) {
                escape_ = false;
            } else if (c == '\\') {
                escape_ = true;
            } else if (c == '"') {
                in_string_ = false;
            }
            continue;
        }
        if (c == '"') {
            in_string_ = true;
        } else if (c == '{' || c == '[') {
            ++depth_;
        } else if (c == '}' || c == ']') {
            if (--depth_ == 0) out.push_back(std::exchange(current_, {}));
        }
    }
    return out;
}

}  // namespace quicsb::codec
