// quicsb: runs experiments, analyzes captures, compares reports and
// evaluates the overhead model.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "common.hpp"
#include "quicsb/harness.hpp"
#include "quicsb/overhead.hpp"

using namespace quicsb;
using namespace quicsb::harness;
using nlohmann::json;

namespace {

void write_json(const json& j, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << '\n';
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot create " + path);
    out << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(Errc::ParseError, path + " is not JSON");
    return j;
}

/// A report file holds one report or {"reports": [...]}.
std::vector<TrafficReport> load_reports(const std::string& path) {
    auto j = read_json(path);
    std::vector<TrafficReport> out;
    if (j.contains("reports")) {
        for (auto& r : j["reports"]) out.push_back(TrafficReport::from_json(r));
    } else {
        out.push_back(TrafficReport::from_json(j));
    }
    return out;
}

std::vector<uint64_t> parse_sizes(const std::string& text) {
    std::vector<uint64_t> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        auto comma = text.find(',', pos);
        auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw Error(Errc::InvalidParams, "bad message size: " + item);
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quicsb: SDN southbound overhead experiments"};
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

    // run
    auto* run = app.add_subcommand("run", "Run an experiment in the simulator");
    ExperimentConfig cfg;
    std::string experiment = "flow-install";
    std::string transport = "both";
    std::string out;
    std::string pcap_out, keylog_out;
    double one_way_ms = 1;
    double bandwidth_mbps = 100;
    double loss = 0;
    run->add_option("--experiment", experiment, "flow-install, queue-config, stats-poll, migration")->required();
    run->add_option("--transport", transport, "quic, tcp or both")->check(CLI::IsMember({"quic", "tcp", "both"}));
    run->add_option("--rate", cfg.rate, "Events per second");
    run->add_option("--duration", cfg.duration, "Seconds");
    run->add_option("--n-flows", cfg.n_flows, "Flow table size for stats-poll");
    run->add_option("--break-at", cfg.break_at, "Migration: break this many seconds in");
    run->add_option("--break-fraction", cfg.break_fraction, "Migration: break after this share of the file");
    run->add_option("--file-bytes", cfg.file_bytes, "Migration transfer size");
    run->add_option("--repeats", cfg.repeats, "Runs per transport, seeds seed..seed+K-1");
    run->add_option("--seed", cfg.seed);
    run->add_flag("--unsafe-rates", cfg.unsafe_rates, "Allow rates above 1000/s");
    run->add_option("--one-way-ms", one_way_ms, "Link propagation delay");
    run->add_option("--bandwidth-mbps", bandwidth_mbps);
    run->add_option("--loss", loss, "Random loss rate per packet");
    run->add_option("--pcap", pcap_out, "Write the capture of the last run");
    run->add_option("--keylog", keylog_out, "Write the key log of the last run");
    run->add_option("--out", out, "Report file; stdout when absent");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Account the bytes in a pcap file");
    std::string pcap_in, filter_text, keylog_in, analyze_out;
    analyze->add_option("--pcap", pcap_in)->required()->check(CLI::ExistingFile);
    analyze->add_option("--filter", filter_text, "a:p,b:p; * for any port");
    analyze->add_option("--keylog", keylog_in, "Secrets for QUIC payload accounting")->check(CLI::ExistingFile);
    analyze->add_option("--out", analyze_out);

    // compare
    auto* cmp = app.add_subcommand("compare", "Pair TCP and QUIC reports by scenario");
    std::vector<std::string> inputs;
    bool cmp_json = false;
    cmp->add_option("reports", inputs)->required()->check(CLI::ExistingFile);
    cmp->add_flag("--json", cmp_json);

    // predict
    auto* predict = app.add_subcommand("predict", "Evaluate the overhead model");
    std::string sizes;
    std::string streams = "1";
    overhead::OverheadParams params;
    std::string observed_report;
    predict->add_option("--sizes", sizes, "Comma-separated message sizes")->required();
    predict->add_option("--streams", streams, "Streams per packet, e.g. 1, 1.5 or 3/2");
    predict->add_option("--mtu", params.mtu);
    predict->add_option("--tcp-header", params.tcp);
    predict->add_option("--quic-header", params.quic_short);
    predict->add_option("--stream-frame", params.stream_frame);
    predict->add_option("--observed", observed_report, "Report to compare against")->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    return tools::guarded([&]() -> int {
        if (*run) {
            cfg.experiment = parse_experiment(experiment);
            cfg.link.one_way = std::chrono::duration_cast<Duration>(std::chrono::duration<double, std::milli>(one_way_ms));
            cfg.link.bandwidth_bps = static_cast<uint64_t>(bandwidth_mbps * 1e6);
            cfg.link.loss = loss;
            std::vector<Transport> ts;
            if (transport != "tcp") ts.push_back(Transport::Quic);
            if (transport != "quic") ts.push_back(Transport::Tcp);
            json results = json::array();
            std::vector<TrafficReport> reports;
            for (auto t : ts) {
                for (int i = 0; i < cfg.repeats; ++i) {
                    ExperimentConfig c = cfg;
                    c.transport = t;
                    c.seed = cfg.seed + static_cast<uint64_t>(i);
                    bool last = t == ts.back() && i + 1 == cfg.repeats;
                    if (last && !pcap_out.empty()) c.pcap_out = pcap_out;
                    if (last && !keylog_out.empty()) c.keylog_out = keylog_out;
                    if (c.experiment == Experiment::Migration) {
                        results.push_back(run_migration(c).to_json());
                    } else {
                        reports.push_back(run_experiment(c));
                        results.push_back(reports.back().to_json());
                    }
                }
            }
            if (results.size() == 1) {
                write_json(results[0], out);
            } else if (cfg.experiment == Experiment::Migration) {
                write_json({{"schema", kReportSchema}, {"traces", results}}, out);
            } else {
                json j = {{"schema", kReportSchema}, {"reports", results}};
                if (ts.size() == 2) j["comparison"] = to_json(compare(reports))["rows"];
                write_json(j, out);
            }
            return 0;
        }
        if (*analyze) {
            auto capture = pcap::read(pcap_in);
            std::optional<Filter> filter;
            if (!filter_text.empty()) filter = Filter::parse(filter_text);
            std::optional<KeyLog> keys;
            if (!keylog_in.empty()) keys = KeyLog::read(keylog_in);
            auto r = analyze_capture(capture, filter, keys ? &*keys : nullptr);
            r.scenario = pcap_in;
            write_json(r.to_json(), analyze_out);
            return 0;
        }
        if (*cmp) {
            std::vector<TrafficReport> all;
            for (auto& f : inputs) {
                auto rs = load_reports(f);
                all.insert(all.end(), rs.begin(), rs.end());
            }
            auto rows = compare(all);
            if (cmp_json) {
                std::cout << to_json(rows).dump(2) << '\n';
            } else {
                std::cout << to_text(rows);
            }
            return 0;
        }
        if (*predict) {
            params.streams = overhead::parse_rational(streams);
            auto m = parse_sizes(sizes);
            auto tcp = overhead::o_tcp(m, params);
            auto quic = overhead::o_quic(m, params);
            json j = {{"o_tcp", tcp}, {"o_quic", quic.value()}, {"o_quic_exact", quic.fixed2()}};
            if (!observed_report.empty()) {
                auto r = load_reports(observed_report).front();
                double predicted = r.transport == Transport::Tcp ? double(tcp) : quic.value();
                j["observed"] = r.overhead_bytes;
                j["error_percent"] = overhead::model_error(predicted, double(r.overhead_bytes));
            }
            std::cout << j.dump(2) << '\n';
            return 0;
        }
        return 1;
    });
}
