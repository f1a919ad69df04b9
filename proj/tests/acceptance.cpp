// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>
#include <unistd.h>

#include "quicsb/harness.hpp"
#include "quicsb/overhead.hpp"
#include "quicsb/runtime.hpp"
#include "quicsb/transport/crypto.hpp"

using namespace quicsb;
using namespace quicsb::harness;
using overhead::MessageSet;
using overhead::OverheadParams;
using overhead::Rational;

namespace {

// Tolerances and limits.
constexpr int kOracleSets = 1000;
constexpr double kOracleSeconds = 10;
constexpr int kDominanceSamples = 10'000;
constexpr uint64_t kFileBytes = 10'000'000;
constexpr double kModelErrorPercent = 5;
constexpr double kTransferSeconds = 120;
constexpr double kReferenceBandPp = 10;
constexpr int kRepeats = 5;
constexpr double kScenarioSeconds = 300;
constexpr double kQuicMovedMax = 1.05;
constexpr double kTcpMovedMin = 1.45;
constexpr size_t kIdentityMessages = 10'000;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Literal packetization written independently of the library: walk every
// message in MSS or frame-sized chunks and charge per-packet headers.
uint64_t walk_tcp(const MessageSet& ms, const OverheadParams& p) {
    const uint64_t hdr = p.ip + p.tcp;
    const uint64_t mss = p.mtu - hdr;
    uint64_t total = 0;
    for (uint64_t m : ms) total += 2 * hdr * ((m + mss - 1) / mss);
    return total;
}

uint64_t walk_quic_single(const MessageSet& ms, const OverheadParams& p) {
    const uint64_t per_packet = p.ip + p.udp + p.quic_short + p.stream_frame;
    const uint64_t room = p.mtu - per_packet;
    uint64_t total = 0;
    for (uint64_t m : ms) {
        for (uint64_t left = m; left > 0; left -= std::min(left, room)) total += per_packet;
    }
    return total;
}

Outcome criterion1() {
    auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    OverheadParams p;
    int mismatches = 0;
    for (int i = 0; i < kOracleSets; ++i) {
        MessageSet ms(1 + rng() % 100);
        for (auto& m : ms) m = 1 + rng() % 1'000'000;
        uint64_t tcp_oracle = overhead::packetization_oracle(ms, overhead::Transport::Tcp, p);
        uint64_t quic_oracle = overhead::packetization_oracle(ms, overhead::Transport::Quic, p);
        bool ok = overhead::o_tcp(ms, p) == tcp_oracle && tcp_oracle == walk_tcp(ms, p) &&
                  overhead::o_quic(ms, p).exact == Rational(static_cast<int64_t>(quic_oracle)) &&
                  quic_oracle == walk_quic_single(ms, p);
        if (!ok) ++mismatches;
    }
    double secs = since(t0);
    return {mismatches == 0 && secs < kOracleSeconds,
            fmt("%d sets, %d mismatches, %.2f s (limit %.0f s)", kOracleSets, mismatches, secs, kOracleSeconds)};
}

Outcome criterion2() {
    std::mt19937_64 rng(202);
    int violations = 0;
    int samples = 0;
    while (samples < kDominanceSamples) {
        OverheadParams p;
        p.ip = 20 + static_cast<uint32_t>(rng() % 41);  // 20..60
        p.tcp = 20 + static_cast<uint32_t>(rng() % 41);
        p.udp = 8;
        p.quic_short = 2 + static_cast<uint32_t>(rng() % 24);
        p.stream_frame = 2 + static_cast<uint32_t>(rng() % 12);
        p.mtu = 576 + static_cast<uint32_t>(rng() % 8425);  // 576..9000
        // Worst-case QUIC header below the TCP header.
        if (p.ip + p.udp + p.quic_short + p.stream_frame >= p.ip + p.tcp) continue;
        p.streams = Rational(static_cast<int64_t>(4 + rng() % 61), 4);  // 1..16
        try {
            overhead::validate_quic(p);
            overhead::validate_tcp(p);
        } catch (const Error&) {
            continue;
        }
        MessageSet ms(1 + rng() % 100);
        for (auto& m : ms) m = 1 + rng() % 1'000'000;
        ++samples;
        if (!(overhead::o_quic(ms, p).exact < Rational(static_cast<int64_t>(overhead::o_tcp(ms, p))))) ++violations;
    }
    return {violations == 0, fmt("%d samples, %d violations", samples, violations)};
}

/// Every application message inside a transfer window: the stats request
/// and each reply message, as written.
MessageSet transfer_messages(size_t flows) {
    MessageSet ms;
    for (auto& m : codec::synth_multipart(codec::MultipartKind::Request, 0, 0)) ms.push_back(m.size());
    for (auto& m : codec::synth_multipart(codec::MultipartKind::Reply, flows, 0)) ms.push_back(m.size());
    return ms;
}

Outcome criterion3() {
    auto t0 = Clock::now();
    ExperimentConfig c;
    c.file_bytes = kFileBytes;
    c.transport = Transport::Tcp;
    auto tcp = run_migration(c);
    c.transport = Transport::Quic;
    auto quic = run_migration(c);
    double secs = since(t0);

    auto ms = transfer_messages(flows_for_bytes(kFileBytes));
    OverheadParams p;
    double tcp_pred = double(overhead::o_tcp(ms, p));
    double tcp_err = overhead::model_error(tcp_pred, double(tcp.report.overhead_bytes));
    OverheadParams q;
    auto s = quic.report.streams_per_packet().value_or(1.0);
    q.streams = overhead::parse_rational(fmt("%.6f", s));
    double quic_pred = overhead::o_quic(ms, q).value();
    double quic_err = overhead::model_error(quic_pred, double(quic.report.overhead_bytes));
    bool ok = tcp.completed && quic.completed && tcp_err <= kModelErrorPercent && quic_err <= kModelErrorPercent &&
              secs < kTransferSeconds;
    return {ok, fmt("tcp observed %llu predicted %.0f error %.2f%%; quic observed %llu predicted %.0f (s=%.3f) "
                    "error %.2f%%; limit %.0f%%; %.1f s",
                    (unsigned long long)tcp.report.overhead_bytes, tcp_pred, tcp_err,
                    (unsigned long long)quic.report.overhead_bytes, quic_pred, s, quic_err, kModelErrorPercent, secs)};
}

struct Scenario {
    Experiment experiment;
    double rate;
    size_t n_flows = 100;
};

struct ScenarioResult {
    double reduction = 0;
    double seconds = 0;
};

ScenarioResult run_scenario(const Scenario& sc) {
    auto t0 = Clock::now();
    std::vector<TrafficReport> reports;
    for (auto t : {Transport::Tcp, Transport::Quic}) {
        for (int i = 0; i < kRepeats; ++i) {
            ExperimentConfig c;
            c.experiment = sc.experiment;
            c.transport = t;
            c.rate = sc.rate;
            c.duration = 10;
            c.n_flows = sc.n_flows;
            c.seed = 1 + static_cast<uint64_t>(i);
            reports.push_back(run_experiment(c));
        }
    }
    auto rows = compare(reports);
    return {rows.at(0).reduction, since(t0)};
}

Outcome criterion4() {
    struct Check {
        std::string name;
        Scenario sc;
        double floor;                  // minimum reduction, percent
        std::optional<double> ref;     // reference reduction at this rate
    };
    std::vector<Check> checks = {
        {"flow-install@10", {Experiment::FlowInstall, 10}, 15, 25.04},
        {"flow-install@100", {Experiment::FlowInstall, 100}, 0, std::nullopt},
        {"flow-install@1000", {Experiment::FlowInstall, 1000}, 0, 28.02},
        {"queue-config@100", {Experiment::QueueConfig, 100}, 20, 30.77},
        {"stats-poll@1/n100", {Experiment::StatsPoll, 1, 100}, 20, 30.48},
    };
    bool ok = true;
    std::string detail;
    std::vector<double> flow_trend;
    for (auto& c : checks) {
        auto r = run_scenario(c.sc);
        bool pass = r.reduction >= c.floor && r.seconds < kScenarioSeconds;
        if (c.ref) pass = pass && std::abs(r.reduction - *c.ref) <= kReferenceBandPp;
        if (c.sc.experiment == Experiment::FlowInstall) flow_trend.push_back(r.reduction);
        ok = ok && pass;
        detail += fmt("%s %.2f%%", c.name.c_str(), r.reduction);
        if (c.ref) detail += fmt(" (ref %.2f +/- %.0f", *c.ref, kReferenceBandPp);
        if (c.floor > 0) detail += fmt(c.ref ? ", floor %.0f" : " (floor %.0f", c.floor);
        if (c.ref || c.floor > 0) detail += ")";
        detail += fmt(" %.1fs %s; ", r.seconds, pass ? "ok" : "FAIL");
    }
    bool monotone = std::is_sorted(flow_trend.begin(), flow_trend.end());
    ok = ok && monotone;
    detail += fmt("flow-install trend %s", monotone ? "non-decreasing" : "NOT non-decreasing");
    return {ok, detail};
}

Outcome criterion5() {
    ExperimentConfig c;
    c.file_bytes = kFileBytes;
    c.break_fraction = 0.5;
    c.transport = Transport::Quic;
    auto quic = run_migration(c);
    c.transport = Transport::Tcp;
    auto tcp = run_migration(c);
    bool ids_same = quic.stream_id_before && quic.stream_id_after && *quic.stream_id_before == *quic.stream_id_after;
    bool offsets_same = quic.offset_before && quic.offset_after && *quic.offset_before == *quic.offset_after;
    bool ok = quic.completed && tcp.completed && quic.moved_ratio() <= kQuicMovedMax &&
              tcp.moved_ratio() >= kTcpMovedMin && quic.non_decreasing() && quic.restarts == 0 && ids_same &&
              offsets_same;
    return {ok, fmt("quic moved %.4fx (max %.2f), restarts %d, monotone %s, stream %llu->%llu, offset %llu->%llu; "
                    "tcp moved %.4fx (min %.2f), restarts %d",
                    quic.moved_ratio(), kQuicMovedMax, quic.restarts, quic.non_decreasing() ? "yes" : "no",
                    (unsigned long long)quic.stream_id_before.value_or(0),
                    (unsigned long long)quic.stream_id_after.value_or(0),
                    (unsigned long long)quic.offset_before.value_or(0),
                    (unsigned long long)quic.offset_after.value_or(0), tcp.moved_ratio(), kTcpMovedMin, tcp.restarts)};
}

Outcome criterion6(const std::filesystem::path& dir) {
    rt::PosixRuntime rt;
    IdentityConfig cfg;
    cfg.client_ip = make_addr(127, 0, 0, 1, 0).ip;
    cfg.server_ip = cfg.client_ip;
    cfg.daemon_ip = make_addr(127, 0, 0, 2, 0).ip;
    cfg.openflow_port = 36653;
    cfg.ovsdb_port = 36640;
    cfg.messages = kIdentityMessages;
    cfg.batch = 20;
    cfg.key_file = dir / "server.key";
    cfg.cert_file = dir / "server.crt";
    transport::crypto::write_self_signed(cfg.key_file, cfg.cert_file, "quicsb");
    auto r = run_identity(rt, cfg);
    auto sum = [](const IdentityDirection& a, const IdentityDirection& b, auto field) { return a.*field + b.*field; };
    auto up_lost = sum(r.openflow_up, r.ovsdb_up, &IdentityDirection::lost);
    auto up_dup = sum(r.openflow_up, r.ovsdb_up, &IdentityDirection::duplicated);
    auto up_reorder = sum(r.openflow_up, r.ovsdb_up, &IdentityDirection::reordered);
    auto up_cross = sum(r.openflow_up, r.ovsdb_up, &IdentityDirection::cross);
    auto down_bad = sum(r.openflow_down, r.ovsdb_down, &IdentityDirection::lost) +
                    sum(r.openflow_down, r.ovsdb_down, &IdentityDirection::duplicated) +
                    sum(r.openflow_down, r.ovsdb_down, &IdentityDirection::reordered) +
                    sum(r.openflow_down, r.ovsdb_down, &IdentityDirection::cross);
    std::string of_ids, odb_ids;
    for (auto id : r.openflow_streams) of_ids += std::to_string(id) + " ";
    for (auto id : r.ovsdb_streams) odb_ids += std::to_string(id) + " ";
    return {r.ok(), fmt("%zu messages (%llu OpenFlow, %llu OVSDB) over loopback: lost %llu, duplicated %llu, "
                        "reordered %llu, cross %llu, echo-path faults %llu; OpenFlow ids { %s}, OVSDB ids { %s}",
                        kIdentityMessages, (unsigned long long)r.openflow_up.sent,
                        (unsigned long long)r.ovsdb_up.sent, (unsigned long long)up_lost,
                        (unsigned long long)up_dup, (unsigned long long)up_reorder, (unsigned long long)up_cross,
                        (unsigned long long)down_bad, of_ids.c_str(), odb_ids.c_str())};
}

Outcome criterion7(const std::filesystem::path& dir) {
    rt::LinkConfig link;
    link.one_way = std::chrono::milliseconds(25);
    auto r = run_resumption(link, 7, dir / "resume");
    auto lead = [](const HandshakeTiming& t) {
        if (!t.first_client_data || !t.first_server_packet) return std::nan("");
        return (*t.first_server_packet - *t.first_client_data) * 1000;
    };
    bool ok = !r.first.data_before_reply() && r.second.data_before_reply() && r.second.zero_rtt && r.second_resumed;
    return {ok, fmt("50 ms RTT; first connection data %.1f ms after the first server packet; second connection "
                    "data %.1f ms before it, 0-RTT %s, resumed %s",
                    -lead(r.first), lead(r.second), r.second.zero_rtt ? "yes" : "no",
                    r.second_resumed ? "yes" : "no")};
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::err);
    auto dir = std::filesystem::temp_directory_path() / ("quicsb-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);

    std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"overhead model matches literal packetization", criterion1},
        {"QUIC overhead below TCP overhead", criterion2},
        {"bulk transfer overhead within model error", criterion3},
        {"control workload reductions and trend", criterion4},
        {"migration resumes without restart", criterion5},
        {"message identity and protocol isolation", [&] { return criterion6(dir); }},
        {"0-RTT first flight on resumption", [&] { return criterion7(dir); }},
    };
    int failed = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("criterion %zu: %s: %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    std::filesystem::remove_all(dir);
    std::printf("%d of %zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
