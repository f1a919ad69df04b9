#include "quicsb/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "quicsb/transport/crypto.hpp"
#include "quicsb/transport/packet.hpp"

namespace quicsb::harness {

using json = nlohmann::json;
using codec::Protocol;
using namespace std::chrono_literals;

namespace {

constexpr size_t kIpUdpHeaders = 28;
constexpr double kAccountingTolerance = 0.01;
constexpr Duration kSettle = 1s;
constexpr Duration kDrain = 300ms;
constexpr double kWallBase = 1'700'000'000.0;

Duration seconds(double s) { return std::chrono::duration_cast<Duration>(std::chrono::duration<double>(s)); }

}  // namespace

std::string_view to_string(Experiment e) {
    switch (e) {
    case Experiment::FlowInstall: return "flow-install";
    case Experiment::QueueConfig: return "queue-config";
    case Experiment::StatsPoll: return "stats-poll";
    case Experiment::Migration: return "migration";
    }
    return "?";
}

std::string_view to_string(Transport t) { return t == Transport::Tcp ? "tcp" : "quic"; }

Experiment parse_experiment(std::string_view s) {
    for (auto e : {Experiment::FlowInstall, Experiment::QueueConfig, Experiment::StatsPoll, Experiment::Migration}) {
        if (to_string(e) == s) return e;
    }
    throw Error(Errc::InvalidConfig, "unknown experiment: " + std::string(s));
}

Transport parse_transport(std::string_view s) {
    if (s == "tcp") return Transport::Tcp;
    if (s == "quic") return Transport::Quic;
    throw Error(Errc::InvalidConfig, "unknown transport: " + std::string(s));
}

void ExperimentConfig::validate() const {
    if (!(rate > 0)) throw Error(Errc::InvalidConfig, "rate must be positive");
    if (!(duration > 0)) throw Error(Errc::InvalidConfig, "duration must be positive");
    if (rate > kMaxSafeRate && !unsafe_rates) {
        throw Error(Errc::InvalidConfig, "rates above 1000/s need --unsafe-rates");
    }
    if (repeats < 1) throw Error(Errc::InvalidConfig, "repeats must be at least 1");
    if (experiment == Experiment::StatsPoll && n_flows == 0) throw Error(Errc::InvalidConfig, "n_flows must be positive");
    if (break_at && break_fraction) throw Error(Errc::InvalidConfig, "give break_at or break_fraction, not both");
    if (break_at) {
        if (*break_at < 0) throw Error(Errc::InvalidConfig, "break_at must not be negative");
        if (experiment == Experiment::Migration && *break_at >= duration) {
            throw Error(Errc::InvalidConfig, "break_at must be below the duration");
        }
    }
    if (break_fraction && (*break_fraction < 0 || *break_fraction >= 1)) {
        throw Error(Errc::InvalidConfig, "break_fraction must be in [0, 1)");
    }
    if (experiment == Experiment::Migration && file_bytes == 0) {
        throw Error(Errc::InvalidConfig, "file size must be positive");
    }
}

// ---------------------------------------------------------------------------

void KeyLog::add(std::string_view label, const Bytes& cid, const Bytes& secret) {
    auto& e = by_cid_[cid];
    if (label == "CLIENT_TRAFFIC_SECRET_0") {
        e.client = secret;
    } else if (label == "SERVER_TRAFFIC_SECRET_0") {
        e.server = secret;
    } else if (label == "CLIENT_EARLY_TRAFFIC_SECRET") {
        e.early = secret;
    }
}

transport::KeyLogger KeyLog::sink() {
    return [this](std::string_view label, const Bytes& cid, const Bytes& secret) { add(label, cid, secret); };
}

KeyLog KeyLog::read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    KeyLog k;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string label, cid, secret;
        if (!(ls >> label >> cid >> secret)) throw Error(Errc::ParseError, "bad key log line: " + line);
        k.add(label, from_hex(cid), from_hex(secret));
    }
    return k;
}

void KeyLog::write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot create " + path.string());
    for (auto& [cid, s] : by_cid_) {
        if (!s.early.empty()) out << "CLIENT_EARLY_TRAFFIC_SECRET " << to_hex(cid) << ' ' << to_hex(s.early) << '\n';
        if (!s.client.empty()) out << "CLIENT_TRAFFIC_SECRET_0 " << to_hex(cid) << ' ' << to_hex(s.client) << '\n';
        if (!s.server.empty()) out << "SERVER_TRAFFIC_SECRET_0 " << to_hex(cid) << ' ' << to_hex(s.server) << '\n';
    }
}

// ---------------------------------------------------------------------------

std::optional<double> TrafficReport::streams_per_packet() const {
    if (short_packets_with_stream == 0) return std::nullopt;
    return double(stream_frames) / double(short_packets_with_stream);
}

void TrafficReport::check_identity() const {
    if (wire_bytes < payload_bytes || overhead_bytes + payload_bytes != wire_bytes) {
        throw Error(Errc::AccountingGap, "overhead + payload != wire for " + scenario);
    }
}

json TrafficReport::to_json() const {
    auto dir = [](const DirectionStats& d) {
        return json{{"packets", d.packets}, {"wire_bytes", d.wire_bytes}, {"payload_bytes", d.payload_bytes}};
    };
    json j = {{"schema", kReportSchema},
              {"scenario", scenario},
              {"experiment", to_string(experiment)},
              {"transport", to_string(transport)},
              {"rate", rate},
              {"duration", duration},
              {"payload_bytes", payload_bytes},
              {"wire_bytes", wire_bytes},
              {"overhead_bytes", overhead_bytes},
              {"packets", packets},
              {"forward", dir(forward)},
              {"reverse", dir(reverse)}};
    if (duration > 0) {
        j["wire_bytes_per_second"] = double(wire_bytes) / duration;
        j["overhead_bytes_per_second"] = double(overhead_bytes) / duration;
    }
    if (transport == Transport::Quic) {
        j["quic"] = {{"short_packets", short_packets},
                     {"short_packets_with_stream", short_packets_with_stream},
                     {"stream_frames", stream_frames},
                     {"undecrypted", undecrypted}};
        if (auto s = streams_per_packet()) j["quic"]["streams_per_packet"] = *s;
    }
    if (counter_wire_bytes) j["counter_wire_bytes"] = *counter_wire_bytes;
    return j;
}

TrafficReport TrafficReport::from_json(const json& j) {
    try {
        if (j.at("schema").get<int>() != kReportSchema) {
            throw Error(Errc::ParseError, "unsupported report schema " + j.at("schema").dump());
        }
        TrafficReport r;
        r.scenario = j.at("scenario").get<std::string>();
        r.experiment = parse_experiment(j.at("experiment").get<std::string>());
        r.transport = parse_transport(j.at("transport").get<std::string>());
        r.rate = j.at("rate").get<double>();
        r.duration = j.at("duration").get<double>();
        r.payload_bytes = j.at("payload_bytes").get<uint64_t>();
        r.wire_bytes = j.at("wire_bytes").get<uint64_t>();
        r.overhead_bytes = j.at("overhead_bytes").get<uint64_t>();
        r.packets = j.at("packets").get<uint64_t>();
        auto dir = [](const json& d) {
            return DirectionStats{d.at("packets").get<uint64_t>(), d.at("wire_bytes").get<uint64_t>(),
                                  d.at("payload_bytes").get<uint64_t>()};
        };
        r.forward = dir(j.at("forward"));
        r.reverse = dir(j.at("reverse"));
        if (j.contains("quic")) {
            const auto& q = j["quic"];
            r.short_packets = q.at("short_packets").get<uint64_t>();
            r.short_packets_with_stream = q.at("short_packets_with_stream").get<uint64_t>();
            r.stream_frames = q.at("stream_frames").get<uint64_t>();
            r.undecrypted = q.at("undecrypted").get<uint64_t>();
        }
        if (j.contains("counter_wire_bytes")) r.counter_wire_bytes = j["counter_wire_bytes"].get<uint64_t>();
        r.check_identity();
        return r;
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, std::string("bad report: ") + e.what());
    }
}

// ---------------------------------------------------------------------------

Filter Filter::parse(std::string_view text) {
    auto comma = text.find(',');
    if (comma == std::string_view::npos) throw Error(Errc::InvalidConfig, "filter needs two endpoints: a:p,b:p");
    auto one = [](std::string_view t) {
        auto colon = t.rfind(':');
        if (colon == std::string_view::npos) return SocketAddr{parse_ip(t), 0};
        if (t.substr(colon + 1) == "*") return SocketAddr{parse_ip(t.substr(0, colon)), 0};
        return parse_addr(t);
    };
    return {one(text.substr(0, comma)), one(text.substr(comma + 1))};
}

int Filter::match(SocketAddr src, SocketAddr dst) const {
    auto is = [](SocketAddr want, SocketAddr got) { return want.ip == got.ip && (want.port == 0 || want.port == got.port); };
    if (is(a, src) && is(b, dst)) return 1;
    if (is(b, src) && is(a, dst)) return -1;
    return 0;
}

namespace {

/// Decrypts captured QUIC packets with logged secrets.
class QuicDecoder {
  public:
    explicit QuicDecoder(const KeyLog& keys) {
        for (auto& [cid, s] : keys.entries()) {
            if (!s.client.empty()) client_.emplace(cid, Key{transport::crypto::Aead::from_secret(s.client), std::nullopt});
            if (!s.early.empty()) early_.emplace(cid, Key{transport::crypto::Aead::from_secret(s.early), std::nullopt});
            if (!s.server.empty()) server_.push_back(Key{transport::crypto::Aead::from_secret(s.server), std::nullopt});
        }
    }

    struct Result {
        uint64_t stream_bytes = 0;
        uint64_t short_packets = 0;
        uint64_t short_with_stream = 0;
        uint64_t stream_frames = 0;
        uint64_t undecrypted = 0;
    };

    using StreamFn = std::function<void(const transport::frame::Stream&)>;

    Result decode(ByteView datagram, const StreamFn& on_stream = nullptr) {
        Result r;
        while (!datagram.empty()) {
            transport::RawPacket pkt;
            Key* key = nullptr;
            try {
                if (transport::detect_header(datagram) == transport::HeaderForm::Long) {
                    pkt = transport::parse_packet(datagram, 0);
                    if (pkt.header.type == transport::PacketType::ZeroRtt) key = find(early_, pkt.header.dcid);
                } else {
                    pkt = transport::parse_packet(datagram, transport::kServerCidLen);
                    key = find(client_, pkt.header.dcid);
                    if (!key) pkt = transport::parse_packet(datagram, 0);
                }
            } catch (const Error&) {
                r.undecrypted++;
                return r;
            }
            datagram = datagram.subspan(pkt.total_len);
            bool is_short = pkt.header.type == transport::PacketType::OneRtt;
            if (is_short) r.short_packets++;
            if (pkt.header.type == transport::PacketType::Initial || pkt.header.type == transport::PacketType::Handshake) {
                continue;  // CRYPTO and ACK only
            }
            std::optional<Bytes> plain;
            if (key) {
                plain = open(*key, pkt);
            } else if (is_short) {
                for (auto& k : server_) {
                    if ((plain = open(k, pkt))) break;
                }
            }
            if (!plain) {
                r.undecrypted++;
                continue;
            }
            bool any = false;
            try {
                for (auto& f : transport::parse_frames(*plain)) {
                    if (auto* s = std::get_if<transport::frame::Stream>(&f)) {
                        if (on_stream) on_stream(*s);
                        r.stream_frames++;
                        r.stream_bytes += s->data.size();
                        any = true;
                    }
                }
            } catch (const Error&) {
                r.undecrypted++;
            }
            if (is_short && any) r.short_with_stream++;
        }
        return r;
    }

  private:
    struct Key {
        transport::crypto::Aead aead;
        std::optional<uint64_t> largest;
    };

    static Key* find(std::map<Bytes, Key>& m, const Bytes& cid) {
        auto it = m.find(cid);
        return it == m.end() ? nullptr : &it->second;
    }

    static std::optional<Bytes> open(Key& k, const transport::RawPacket& pkt) {
        uint64_t pn = transport::decode_packet_number(k.largest.value_or(0), pkt.header.truncated_pn, pkt.header.pn_len);
        if (!k.largest) pn = pkt.header.truncated_pn;
        try {
            auto plain = k.aead.open(pn, pkt.header_bytes, pkt.ciphertext);
            k.largest = std::max(k.largest.value_or(0), pn);
            return plain;
        } catch (const Error&) {
            return std::nullopt;
        }
    }

    std::map<Bytes, Key> client_;
    std::map<Bytes, Key> early_;
    std::vector<Key> server_;
};

/// Lowest STREAM offset for stream_id among packets sent from `from`.
std::optional<uint64_t> first_offset_from(const pcap::Capture& capture, const KeyLog& keys, SocketAddr from,
                                          uint64_t stream_id) {
    QuicDecoder dec(keys);
    std::optional<uint64_t> lowest;
    for (auto& rec : capture.records) {
        auto ipv = pcap::ip_payload(capture.linktype, rec.data);
        if (!ipv) continue;
        auto ip = pcap::parse_ip(*ipv);
        if (!ip || ip->protocol != pcap::kProtoUdp) continue;
        // Every datagram goes through the decoder so packet numbers stay in step.
        bool wanted = ip->src == from;
        dec.decode(ip->payload, [&](const transport::frame::Stream& f) {
            if (wanted && f.id == stream_id) lowest = std::min(lowest.value_or(f.offset), f.offset);
        });
    }
    return lowest;
}

}  // namespace

TrafficReport analyze_capture(const pcap::Capture& capture, const std::optional<Filter>& filter, const KeyLog* keys) {
    TrafficReport r;
    std::optional<QuicDecoder> quic;
    if (keys && !keys->empty()) quic.emplace(*keys);
    std::optional<Filter> f = filter;
    bool saw_udp = false;
    double first_ts = 0;
    double last_ts = 0;
    for (auto& rec : capture.records) {
        auto ipv = pcap::ip_payload(capture.linktype, rec.data);
        if (!ipv) continue;
        std::optional<pcap::IpPacket> ip;
        try {
            ip = pcap::parse_ip(*ipv);
        } catch (const Error&) {
            continue;  // truncated capture record
        }
        if (!ip) continue;
        if (!f) f = Filter{ip->src, ip->dst};
        int dir = f->match(ip->src, ip->dst);
        if (dir == 0) continue;
        if (r.packets == 0) first_ts = rec.timestamp;
        last_ts = rec.timestamp;
        uint64_t payload = ip->payload.size();
        if (ip->protocol == pcap::kProtoUdp) {
            saw_udp = true;
            if (quic) {
                auto q = quic->decode(ip->payload);
                payload = q.stream_bytes;
                r.short_packets += q.short_packets;
                r.short_packets_with_stream += q.short_with_stream;
                r.stream_frames += q.stream_frames;
                r.undecrypted += q.undecrypted;
            }
        }
        auto& d = dir > 0 ? r.forward : r.reverse;
        d.packets++;
        d.wire_bytes += ip->total_length;
        d.payload_bytes += payload;
        r.packets++;
        r.wire_bytes += ip->total_length;
        r.payload_bytes += payload;
    }
    if (r.packets == 0) throw Error(Errc::EmptyCapture, "no matching packets in capture");
    r.overhead_bytes = r.wire_bytes - r.payload_bytes;
    r.transport = saw_udp ? Transport::Quic : Transport::Tcp;
    r.duration = last_ts - first_ts;
    r.check_identity();
    return r;
}

// ---------------------------------------------------------------------------

const uint32_t Testbed::kSwitchIp = make_addr(10, 0, 0, 1, 0).ip;
const uint32_t Testbed::kControllerIp = make_addr(10, 0, 0, 2, 0).ip;

Testbed::Testbed(TestbedConfig cfg) : cfg_(std::move(cfg)) {
    try {
        if (cfg_.workdir.empty()) {
            std::random_device rd;
            credentials_dir_ = std::filesystem::temp_directory_path() / ("quicsb-" + std::to_string(rd()));
            own_dir_ = true;
        } else {
            credentials_dir_ = cfg_.workdir;
        }
        std::filesystem::create_directories(credentials_dir_);
        auto key = credentials_dir_ / "server.key";
        auto cert = credentials_dir_ / "server.crt";
        if (!std::filesystem::exists(key) || !std::filesystem::exists(cert)) {
            transport::crypto::write_self_signed(key, cert, "quicsb");
        }

        rt_ = std::make_unique<rt::SimRuntime>(cfg_.link, cfg_.seed);
        rt_->add_host(kSwitchIp);
        rt_->add_host(kControllerIp);
        capture_.linktype = pcap::kLinkRaw;
        rt_->set_tap([this](TimePoint t, ByteView p) {
            if (!capturing_) return;
            pcap::Record rec;
            rec.timestamp = kWallBase + to_seconds(t.time_since_epoch());
            rec.data.assign(p.begin(), p.end());
            rec.original_length = static_cast<uint32_t>(p.size());
            capture_.records.push_back(std::move(rec));
        });

        using endpoints::Scheme;
        using endpoints::TransportSpec;
        endpoints::ControllerConfig cc;
        endpoints::SwitchConfig sc;
        sc.local_ip = kSwitchIp;
        sc.initial_flows = cfg_.initial_flows;
        sc.probe_interval = cfg_.probe_interval;
        cc.openflow = {Scheme::Udp, {kControllerIp, mux::kOpenFlowPort}};
        cc.ovsdb = {Scheme::Udp, {kControllerIp, mux::kOvsdbPort}};
        if (cfg_.transport == Transport::Quic) {
            agent::ServerConfig s;
            s.listen = {kControllerIp, kQuicPort};
            s.key_file = key;
            s.cert_file = cert;
            s.daemon_ip = kControllerIp;
            s.keylog = keys_.sink();
            server_ = std::make_unique<agent::AgentServer>(*rt_, s);
            ctl_ = std::make_unique<endpoints::ControllerEmulator>(*rt_, cc);

            agent::ClientConfig c;
            c.server = {kControllerIp, kQuicPort};
            c.quic_local = {kSwitchIp, 0};
            c.local_ip = kSwitchIp;
            c.session_file = cfg_.session_file;
            c.keylog = keys_.sink();
            client_ = std::make_unique<agent::AgentClient>(*rt_, c);
            sc.controller = {Scheme::Udp, {kSwitchIp, mux::kOpenFlowPort}};
            sc.manager = {Scheme::Udp, {kSwitchIp, mux::kOvsdbPort}};
        } else {
            cc.openflow.scheme = Scheme::Tcp;
            cc.ovsdb.scheme = Scheme::Tcp;
            ctl_ = std::make_unique<endpoints::ControllerEmulator>(*rt_, cc);
            sc.controller = cc.openflow;
            sc.manager = cc.ovsdb;
        }
        sw_ = std::make_unique<endpoints::SwitchEmulator>(*rt_, sc);
    } catch (const Error& e) {
        throw Error(Errc::LaunchFailure, std::string("testbed launch failed: ") + e.what());
    }
}

Testbed::~Testbed() {
    sw_.reset();
    ctl_.reset();
    client_.reset();
    server_.reset();
    rt_.reset();
    if (own_dir_) {
        std::error_code ec;
        std::filesystem::remove_all(credentials_dir_, ec);
    }
}

void Testbed::start_capture() {
    capture_.records.clear();
    capturing_ = true;
}

void Testbed::stop_capture() { capturing_ = false; }

void Testbed::wait_ready(Duration limit) {
    auto ready = [this] {
        if (!sw_->active() || !ctl_->active()) return false;
        if (ctl_->openflow().messages_received() == 0 || ctl_->ovsdb().messages_received() == 0) return false;
        if (sw_->openflow().messages_received() == 0 || sw_->ovsdb().messages_received() == 0) return false;
        if (cfg_.transport == Transport::Quic) {
            if (!client_->established()) return false;
            auto* m = server_->conn_map();
            if (!m || m->size() != 2) return false;
        }
        return true;
    };
    if (!rt_->run_until(ready, rt_->now() + limit)) {
        throw Error(Errc::LaunchFailure, "testbed did not come up");
    }
}

uint64_t Testbed::quic_wire_counter() {
    uint64_t total = 0;
    for (auto* c : {client_ ? client_->connection() : nullptr, server_ ? server_->connection() : nullptr}) {
        if (!c) continue;
        total += c->stats().bytes_sent + kIpUdpHeaders * c->stats().datagrams_sent;
    }
    return total;
}

// ---------------------------------------------------------------------------

namespace {

std::string scenario_name(const ExperimentConfig& cfg) {
    std::ostringstream s;
    s << to_string(cfg.experiment) << '@' << cfg.rate;
    if (cfg.experiment == Experiment::StatsPoll) s << "/n" << cfg.n_flows;
    return s.str();
}

void write_artifacts(const ExperimentConfig& cfg, Testbed& tb) {
    if (cfg.pcap_out) {
        pcap::Writer w(*cfg.pcap_out, tb.capture().linktype);
        for (auto& r : tb.capture().records) w.write(r.timestamp, r.data);
    }
    if (cfg.keylog_out) tb.keys().write(*cfg.keylog_out);
}

}  // namespace

TrafficReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.experiment == Experiment::Migration) {
        throw Error(Errc::InvalidConfig, "the migration experiment runs through run_migration");
    }
    TestbedConfig tc;
    tc.transport = cfg.transport;
    tc.link = cfg.link;
    tc.seed = cfg.seed;
    tc.initial_flows = cfg.experiment == Experiment::StatsPoll ? cfg.n_flows : 0;
    Testbed tb(tc);
    tb.wait_ready();
    auto& rt = tb.rt();
    rt.run_for(kSettle);
    tb.ctl().set_keep_log(false);

    std::mt19937_64 rng(cfg.seed);
    auto t0 = rt.now();
    tb.start_capture();
    uint64_t counter0 = cfg.transport == Transport::Quic ? tb.quic_wire_counter() : 0;
    auto events = static_cast<size_t>(std::llround(cfg.rate * cfg.duration));
    for (size_t i = 0; i < events; ++i) {
        auto at = t0 + seconds(double(i) / cfg.rate);
        rt.schedule(at, [&tb, &cfg, &rng, i] {
            switch (cfg.experiment) {
            case Experiment::FlowInstall:
                tb.ctl().send_flow_mods(1);
                break;
            case Experiment::QueueConfig: {
                uint64_t max = 1'000'000 * (1 + rng() % 1000);
                tb.ctl().send_queue_transact(i + 1, {max / 10, max});
                break;
            }
            case Experiment::StatsPoll:
                tb.ctl().poll_stats();
                break;
            case Experiment::Migration:
                break;
            }
        });
    }
    rt.run_until([] { return false; }, t0 + seconds(cfg.duration));
    if (!rt.run_until([&] { return tb.ctl().outstanding() == 0; }, rt.now() + 60s)) {
        throw Error(Errc::LaunchFailure, "workload replies did not arrive");
    }
    rt.run_for(kDrain);
    tb.stop_capture();
    auto window = rt.now() - t0;

    TrafficReport r = analyze_capture(tb.capture(), tb.filter(), &tb.keys());
    r.scenario = scenario_name(cfg);
    r.experiment = cfg.experiment;
    r.transport = cfg.transport;
    r.rate = cfg.rate;
    r.duration = to_seconds(window);
    if (cfg.transport == Transport::Quic) {
        uint64_t counted = tb.quic_wire_counter() - counter0;
        r.counter_wire_bytes = counted;
        double gap = std::abs(double(counted) - double(r.wire_bytes)) / double(std::max<uint64_t>(r.wire_bytes, 1));
        if (gap > kAccountingTolerance) {
            throw Error(Errc::AccountingGap, "capture and counters disagree by " + std::to_string(gap * 100) + "%");
        }
        if (r.undecrypted > 0) spdlog::warn("{} QUIC packets could not be decrypted", r.undecrypted);
    }
    write_artifacts(cfg, tb);
    return r;
}

Quartiles quartiles(std::vector<double> v) {
    if (v.empty()) return {};
    std::sort(v.begin(), v.end());
    auto at = [&](double q) {
        double pos = q * double(v.size() - 1);
        auto lo = static_cast<size_t>(std::floor(pos));
        auto hi = static_cast<size_t>(std::ceil(pos));
        return v[lo] + (v[hi] - v[lo]) * (pos - double(lo));
    };
    return {at(0.25), at(0.5), at(0.75)};
}

// ---------------------------------------------------------------------------

namespace {
constexpr size_t kRecordsPerReply = (codec::kOpenFlowMaxLength - codec::kMultipartHeader) / codec::kFlowStatsRecord;
}

size_t flows_for_bytes(uint64_t file_bytes) {
    constexpr uint64_t full = kRecordsPerReply * codec::kFlowStatsRecord + codec::kMultipartHeader;
    size_t n = (file_bytes / full) * kRecordsPerReply;
    uint64_t rest = file_bytes % full;
    if (rest > codec::kMultipartHeader) n += (rest - codec::kMultipartHeader) / codec::kFlowStatsRecord;
    return std::max<size_t>(n, 1);
}

uint64_t reply_bytes(size_t n_flows) {
    uint64_t messages = std::max<uint64_t>(1, (n_flows + kRecordsPerReply - 1) / kRecordsPerReply);
    return messages * codec::kMultipartHeader + uint64_t(n_flows) * codec::kFlowStatsRecord;
}

bool MigrationTrace::non_decreasing() const {
    for (size_t i = 1; i < series.size(); ++i) {
        if (series[i].second < series[i - 1].second) return false;
    }
    return true;
}

json MigrationTrace::to_json() const {
    json s = json::array();
    for (auto& [t, b] : series) s.push_back({t, b});
    json j = {{"schema", kReportSchema},
              {"transport", to_string(transport)},
              {"file_bytes", file_bytes},
              {"payload_moved", payload_moved},
              {"moved_ratio", moved_ratio()},
              {"restarts", restarts},
              {"completed", completed},
              {"failed", failed},
              {"duration", duration},
              {"connections_accepted", connections_accepted},
              {"series", s},
              {"report", report.to_json()}};
    if (!failure.empty()) j["failure"] = failure;
    if (break_time) j["break_time"] = *break_time;
    if (resume_time) j["resume_time"] = *resume_time;
    if (stream_id_before) j["stream_id_before"] = *stream_id_before;
    if (stream_id_after) j["stream_id_after"] = *stream_id_after;
    if (offset_before) j["offset_before"] = *offset_before;
    if (offset_after) j["offset_after"] = *offset_after;
    if (resend_from) j["resend_from"] = *resend_from;
    return j;
}

MigrationTrace run_migration(const ExperimentConfig& cfg_in) {
    ExperimentConfig cfg = cfg_in;
    cfg.experiment = Experiment::Migration;
    cfg.validate();
    size_t n = flows_for_bytes(cfg.file_bytes);
    MigrationTrace tr;
    tr.transport = cfg.transport;
    tr.file_bytes = reply_bytes(n);

    TestbedConfig tc;
    tc.transport = cfg.transport;
    tc.link = cfg.link;
    tc.seed = cfg.seed;
    tc.initial_flows = n;
    Testbed tb(tc);
    tb.wait_ready();
    auto& rt = tb.rt();
    rt.run_for(kSettle);
    auto& ctl = tb.ctl();
    ctl.set_keep_log(false);
    const uint16_t of_port = mux::kOpenFlowPort;

    tb.start_capture();
    auto t0 = rt.now();
    auto since = [&] { return to_seconds(rt.now() - t0); };
    uint64_t cum = 0;
    uint32_t xid = 0;
    bool done = false;
    bool broken = false;
    uint64_t last_offset = 0;
    uint64_t accepted_before = tb.server() ? tb.server()->counters().connections_accepted : 0;

    SocketAddr migrated_from = tb.client() ? tb.client()->quic_local() : SocketAddr{};
    auto server_offset = [&](uint64_t id) -> std::optional<uint64_t> {
        auto* c = tb.server() ? tb.server()->connection() : nullptr;
        if (!c || !c->has_stream(id)) return std::nullopt;
        return c->stream_recv_offset(id);
    };

    auto do_break = [&] {
        if (broken || done) return;
        broken = true;
        tr.break_time = since();
        if (cfg.transport == Transport::Quic) {
            auto* client = tb.client();
            if (auto l = client->conn_map().lookup(of_port)) {
                tr.stream_id_before = l->id();
                tr.offset_before = server_offset(l->id());
                last_offset = tr.offset_before.value_or(0);
            }
            // The old port goes dark, as when the interface drops.
            migrated_from = client->quic_local();
            rt.set_blackhole(migrated_from, true);
            try {
                client->migrate(0);
            } catch (const Error& e) {
                tr.failed = true;
                tr.failure = e.what();
            }
        } else {
            for (auto* s : {&tb.sw().openflow(), &tb.sw().ovsdb()}) {
                if (auto l = s->local()) rt.set_blackhole(*l, true);
            }
            tb.sw().rebind();
        }
    };

    ctl.set_on_stats_reply([&](uint32_t x, size_t bytes, bool more) {
        if (x != xid) return;
        cum += bytes;
        tr.series.emplace_back(since(), cum);
        if (broken && !tr.resume_time && cfg.transport == Transport::Quic) {
            tr.resume_time = since();
            if (auto l = tb.client()->conn_map().lookup(of_port)) {
                tr.stream_id_after = l->id();
            }
        }
        if (!more) done = true;
        if (cfg.break_fraction && !broken && double(cum) >= *cfg.break_fraction * double(tr.file_bytes)) {
            rt.post(do_break);
        }
    });
    if (cfg.transport == Transport::Tcp) {
        // A new switch connection after the break restarts the transfer.
        ctl.openflow().set_on_active([&] {
            if (!broken || done) return;
            tr.restarts++;
            tr.resume_time = since();
            cum = 0;
            tr.series.emplace_back(since(), 0);
            xid = ctl.poll_stats();
        });
    }

    tr.series.emplace_back(0.0, 0);
    xid = ctl.poll_stats();
    if (cfg.break_at) rt.schedule(t0 + seconds(*cfg.break_at), do_break);
    if (cfg.break_fraction && *cfg.break_fraction == 0) do_break();

    auto limit = t0 + std::max(seconds(cfg.duration), Duration(120s));
    rt.run_until(
        [&] {
            if (cfg.transport == Transport::Quic && broken) {
                if (tb.client()->last_error() == Errc::PathValidationTimeout) {
                    tr.failed = true;
                    tr.failure = "ResumeFailure: path validation failed";
                }
                // The server-side offset just before the first byte that
                // arrives after the break.
                if (tr.offset_before && !tr.offset_after) {
                    auto now_off = server_offset(*tr.stream_id_before);
                    if (!now_off || *now_off < last_offset) {
                        tr.offset_after = now_off.value_or(0);
                    } else if (*now_off > last_offset) {
                        tr.offset_after = last_offset;
                    }
                    if (now_off) last_offset = *now_off;
                }
            }
            return done || tr.failed;
        },
        limit);
    tr.completed = done;
    tr.duration = since();
    if (!done && !tr.failed) {
        tr.failed = true;
        tr.failure = "transfer did not complete";
    }
    rt.run_for(kDrain);
    tb.stop_capture();
    tr.report = analyze_capture(tb.capture(), tb.filter(), &tb.keys());
    tr.report.scenario = "migration";
    tr.report.experiment = Experiment::Migration;
    tr.report.transport = cfg.transport;
    tr.payload_moved = tr.report.forward.payload_bytes;
    if (cfg.transport == Transport::Quic && tr.stream_id_after && tb.client()->quic_local() != migrated_from) {
        tr.resend_from = first_offset_from(tb.capture(), tb.keys(), tb.client()->quic_local(), *tr.stream_id_after);
    }
    if (tb.server()) tr.connections_accepted = tb.server()->counters().connections_accepted - accepted_before;
    write_artifacts(cfg, tb);
    return tr;
}

// ---------------------------------------------------------------------------

HandshakeTiming handshake_timing(const pcap::Capture& capture, const KeyLog& keys, uint32_t client_ip) {
    HandshakeTiming t;
    QuicDecoder dec(keys);
    for (auto& rec : capture.records) {
        auto ipv = pcap::ip_payload(capture.linktype, rec.data);
        if (!ipv) continue;
        auto ip = pcap::parse_ip(*ipv);
        if (!ip || ip->protocol != pcap::kProtoUdp) continue;
        bool from_client = ip->src.ip == client_ip;
        if (!from_client && !t.first_server_packet) t.first_server_packet = rec.timestamp;
        bool data = false;
        dec.decode(ip->payload, [&](const transport::frame::Stream&) { data = true; });
        if (from_client && data && !t.first_client_data) {
            t.first_client_data = rec.timestamp;
            t.zero_rtt = transport::detect_header(ip->payload) == transport::HeaderForm::Long &&
                         transport::parse_packet(ip->payload, 0).header.type == transport::PacketType::ZeroRtt;
        }
    }
    return t;
}

ResumptionResult run_resumption(const rt::LinkConfig& link, uint64_t seed, const std::filesystem::path& workdir) {
    ResumptionResult out;
    std::filesystem::create_directories(workdir);
    auto session = workdir / "session.bin";
    std::filesystem::remove(session);
    for (int round = 0; round < 2; ++round) {
        TestbedConfig tc;
        tc.transport = Transport::Quic;
        tc.link = link;
        tc.seed = seed + round;
        tc.session_file = session;
        tc.workdir = workdir;
        Testbed tb(tc);
        // Nothing has been sent yet: connecting is posted, not run.
        tb.start_capture();
        bool resumed = false;
        tb.wait_ready();
        tb.rt().run_for(kSettle);
        tb.stop_capture();
        if (auto* c = tb.client()->connection()) resumed = c->is_resumed();
        auto timing = handshake_timing(tb.capture(), tb.keys(), Testbed::kSwitchIp);
        if (round == 0) {
            out.first = timing;
        } else {
            out.second = timing;
            out.second_resumed = resumed;
        }
        if (!std::filesystem::exists(session)) throw Error(Errc::LaunchFailure, "no session ticket was saved");
    }
    return out;
}

// ---------------------------------------------------------------------------

bool IdentityResult::ids_follow_policy() const {
    for (auto id : openflow_streams) {
        if (id % 2 != 0 || id % 3 != 0) return false;
    }
    for (auto id : ovsdb_streams) {
        if (id % 2 != 0 || id % 3 == 0) return false;
    }
    return true;
}

bool IdentityResult::ok() const {
    return finished && openflow_up.clean() && ovsdb_up.clean() && openflow_down.clean() && ovsdb_down.clean() &&
           ids_follow_policy() && !openflow_streams.empty() && !ovsdb_streams.empty();
}

namespace {

/// Sequence-numbered test messages. OpenFlow carries the sequence in the
/// xid; OVSDB in the JSON-RPC id. The body is a function of the sequence,
/// so corruption is detectable.
Bytes identity_message(Protocol p, uint32_t seq, size_t size) {
    if (p == Protocol::OpenFlow) {
        size = std::max(size, codec::kOpenFlowHeaderSize);
        Bytes body(size - codec::kOpenFlowHeaderSize);
        for (size_t i = 0; i < body.size(); ++i) body[i] = static_cast<uint8_t>(seq * 7 + i);
        return codec::encode_openflow(codec::ofpt::EchoRequest, seq, body).payload;
    }
    std::string pad(size, char('a' + seq % 26));
    return codec::make_ovsdb({{"id", seq}, {"method", "echo"}, {"params", json::array({pad})}}).payload;
}

std::optional<uint32_t> identity_seq(Protocol p, ByteView data) {
    try {
        if (p == Protocol::OpenFlow) {
            auto h = codec::decode_openflow_header(data);
            if (h.length != data.size()) return std::nullopt;
            return h.xid;
        }
        auto rpc = codec::parse_ovsdb(data);
        if (!rpc["id"].is_number_unsigned()) return std::nullopt;
        return rpc["id"].get<uint32_t>();
    } catch (const Error&) {
        return std::nullopt;
    }
}

class SeqChecker {
  public:
    SeqChecker(IdentityDirection& d, const std::vector<Bytes>& sent) : d_(d), sent_(sent), seen_(sent.size()) {}

    void observe(std::optional<uint32_t> seq, ByteView data) {
        d_.received++;
        if (!seq || *seq >= sent_.size()) {
            d_.corrupted++;
            return;
        }
        if (seen_[*seq]) {
            d_.duplicated++;
            return;
        }
        seen_[*seq] = true;
        if (!std::equal(data.begin(), data.end(), sent_[*seq].begin(), sent_[*seq].end())) d_.corrupted++;
        if (*seq != next_) d_.reordered++;
        next_ = *seq + 1;
    }

    void finish() {
        d_.sent = sent_.size();
        d_.lost = static_cast<uint64_t>(std::count(seen_.begin(), seen_.end(), false));
    }

  private:
    IdentityDirection& d_;
    const std::vector<Bytes>& sent_;
    std::vector<bool> seen_;
    uint32_t next_ = 0;
};

}  // namespace

IdentityResult run_identity(rt::Runtime& rt, const IdentityConfig& cfg) {
    IdentityResult res;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<size_t> size_dist(codec::kOpenFlowHeaderSize, cfg.max_size);

    // Random interleaving of the two protocols.
    std::vector<Protocol> order(cfg.messages);
    std::vector<Bytes> of_msgs;
    std::vector<Bytes> odb_msgs;
    for (auto& p : order) {
        p = rng() % 2 ? Protocol::OpenFlow : Protocol::Ovsdb;
        auto& v = p == Protocol::OpenFlow ? of_msgs : odb_msgs;
        // JSON framing adds about 40 bytes around the pad.
        size_t size = size_dist(rng);
        if (p == Protocol::Ovsdb) size = size > 64 ? size - 64 : 1;
        v.push_back(identity_message(p, static_cast<uint32_t>(v.size()), size));
    }

    SeqChecker of_up(res.openflow_up, of_msgs), odb_up(res.ovsdb_up, odb_msgs);
    SeqChecker of_down(res.openflow_down, of_msgs), odb_down(res.ovsdb_down, odb_msgs);
    uint64_t downs = 0;

    agent::ServerConfig sc;
    sc.listen = {cfg.server_ip, 0};
    sc.key_file = cfg.key_file;
    sc.cert_file = cfg.cert_file;
    sc.daemon_ip = cfg.daemon_ip;
    sc.openflow_port = cfg.openflow_port;
    sc.ovsdb_port = cfg.ovsdb_port;
    agent::AgentServer server(rt, sc);

    // Controller daemons: check and echo.
    std::unique_ptr<rt::UdpSocket> ctl_of, ctl_odb;
    auto controller = [&](Protocol own, SeqChecker& own_check, rt::UdpSocket** self) {
        return [&, own, self](ByteView d, SocketAddr from) {
            Protocol other = own == Protocol::OpenFlow ? Protocol::Ovsdb : Protocol::OpenFlow;
            if (!identity_seq(own, d) && identity_seq(other, d)) {
                (own == Protocol::OpenFlow ? res.openflow_up : res.ovsdb_up).cross++;
                return;
            }
            own_check.observe(identity_seq(own, d), d);
            (*self)->send_to(d, from);
        };
    };
    rt::UdpSocket* of_ptr = nullptr;
    rt::UdpSocket* odb_ptr = nullptr;
    ctl_of = rt.bind_udp({cfg.daemon_ip, cfg.openflow_port}, controller(Protocol::OpenFlow, of_up, &of_ptr));
    ctl_odb = rt.bind_udp({cfg.daemon_ip, cfg.ovsdb_port}, controller(Protocol::Ovsdb, odb_up, &odb_ptr));
    of_ptr = ctl_of.get();
    odb_ptr = ctl_odb.get();

    agent::ClientConfig cc;
    cc.server = server.local();
    cc.quic_local = {cfg.client_ip, 0};
    cc.local_ip = cfg.client_ip;
    cc.openflow_port = cfg.openflow_port;
    cc.ovsdb_port = cfg.ovsdb_port;
    agent::AgentClient client(rt, cc);
    client.set_stream_tap([&](uint64_t id, uint16_t port, ByteView) {
        (port == cfg.openflow_port ? res.openflow_streams : res.ovsdb_streams).insert(id);
    });

    // Switch daemons: receive the echoes.
    auto switch_side = [&](Protocol own, SeqChecker& own_check) {
        return [&, own](ByteView d, SocketAddr) {
            downs++;
            Protocol other = own == Protocol::OpenFlow ? Protocol::Ovsdb : Protocol::OpenFlow;
            if (!identity_seq(own, d) && identity_seq(other, d)) {
                (own == Protocol::OpenFlow ? res.openflow_down : res.ovsdb_down).cross++;
                return;
            }
            own_check.observe(identity_seq(own, d), d);
        };
    };
    auto sw_of = rt.bind_udp({cfg.client_ip, 0}, switch_side(Protocol::OpenFlow, of_down));
    auto sw_odb = rt.bind_udp({cfg.client_ip, 0}, switch_side(Protocol::Ovsdb, odb_down));

    if (!rt.run_until([&] { return client.established(); }, rt.now() + cfg.limit)) {
        throw Error(Errc::LaunchFailure, "agent pair did not connect");
    }

    size_t next = 0, of_i = 0, odb_i = 0;
    std::function<void()> send_batch = [&] {
        for (size_t k = 0; k < cfg.batch && next < order.size(); ++k, ++next) {
            if (order[next] == Protocol::OpenFlow) {
                sw_of->send_to(of_msgs[of_i++], {cfg.client_ip, cfg.openflow_port});
            } else {
                sw_odb->send_to(odb_msgs[odb_i++], {cfg.client_ip, cfg.ovsdb_port});
            }
        }
        if (next < order.size()) rt.schedule(rt.now() + cfg.tick, send_batch);
    };
    rt.post(send_batch);
    res.finished = rt.run_until([&] { return downs >= cfg.messages; }, rt.now() + cfg.limit);
    // Anything extra (duplicates) would show up shortly after.
    rt.run_for(std::chrono::milliseconds(50));
    of_up.finish();
    odb_up.finish();
    of_down.finish();
    odb_down.finish();
    client.shutdown();
    return res;
}

// ---------------------------------------------------------------------------

double reduction_percent(double tcp, double quic) {
    if (tcp <= 0) throw Error(Errc::InvalidObservation, "TCP byte count must be positive");
    return (tcp - quic) / tcp * 100.0;
}

std::vector<ComparisonRow> compare(const std::vector<TrafficReport>& reports) {
    struct Acc {
        std::vector<double> overhead[2];
        std::vector<double> wire[2];
    };
    std::map<std::string, Acc> by;
    std::vector<std::string> order;
    for (auto& r : reports) {
        if (!by.count(r.scenario)) order.push_back(r.scenario);
        int k = r.transport == Transport::Tcp ? 0 : 1;
        by[r.scenario].overhead[k].push_back(double(r.overhead_bytes));
        by[r.scenario].wire[k].push_back(double(r.wire_bytes));
    }
    std::vector<ComparisonRow> rows;
    for (auto& name : order) {
        auto& a = by[name];
        if (a.overhead[0].empty() || a.overhead[1].empty()) {
            throw Error(Errc::MissingPair, "scenario " + name + " needs both a tcp and a quic report");
        }
        ComparisonRow row;
        row.scenario = name;
        row.tcp_bytes = static_cast<uint64_t>(std::llround(quartiles(a.overhead[0]).median));
        row.quic_bytes = static_cast<uint64_t>(std::llround(quartiles(a.overhead[1]).median));
        row.tcp_wire = static_cast<uint64_t>(std::llround(quartiles(a.wire[0]).median));
        row.quic_wire = static_cast<uint64_t>(std::llround(quartiles(a.wire[1]).median));
        row.reduction = reduction_percent(double(row.tcp_bytes), double(row.quic_bytes));
        row.wire_reduction = reduction_percent(double(row.tcp_wire), double(row.quic_wire));
        rows.push_back(row);
    }
    return rows;
}

json to_json(const std::vector<ComparisonRow>& rows) {
    json out = {{"schema", kReportSchema}, {"rows", json::array()}};
    for (auto& r : rows) {
        out["rows"].push_back({{"scenario", r.scenario},
                               {"tcp_overhead_bytes", r.tcp_bytes},
                               {"quic_overhead_bytes", r.quic_bytes},
                               {"reduction_percent", std::round(r.reduction * 100) / 100},
                               {"tcp_wire_bytes", r.tcp_wire},
                               {"quic_wire_bytes", r.quic_wire},
                               {"wire_reduction_percent", std::round(r.wire_reduction * 100) / 100}});
    }
    return out;
}

std::string to_text(const std::vector<ComparisonRow>& rows) {
    std::ostringstream s;
    s << std::left << std::setw(24) << "scenario" << std::right << std::setw(14) << "tcp" << std::setw(14) << "quic"
      << std::setw(12) << "reduction" << std::setw(14) << "tcp wire" << std::setw(14) << "quic wire" << std::setw(12)
      << "wire red." << '\n';
    s << std::fixed << std::setprecision(2);
    for (auto& r : rows) {
        s << std::left << std::setw(24) << r.scenario << std::right << std::setw(14) << r.tcp_bytes << std::setw(14)
          << r.quic_bytes << std::setw(11) << r.reduction << '%' << std::setw(14) << r.tcp_wire << std::setw(14)
          << r.quic_wire << std::setw(11) << r.wire_reduction << "%\n";
    }
    return s.str();
}

}  // namespace quicsb::harness
