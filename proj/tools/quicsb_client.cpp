// quicsb-client: switch-side agent. Daemons send to <ofport> and <ovsdbport>
// on the local address; everything goes to the server over one QUIC
// connection.

#include <fstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "common.hpp"
#include "quicsb/agent.hpp"

using namespace quicsb;

int main(int argc, char** argv) {
    CLI::App app{"quicsb-client: switch-side QUIC agent"};
    std::string addr;
    uint16_t port = 0, of_port = 0, odb_port = 0;
    std::string local_ip = "127.0.0.1";
    std::string session_file, metrics_out, keylog, log_level = "info";
    app.add_option("addr", addr, "Server address")->required();
    app.add_option("port", port, "Server UDP port")->required();
    app.add_option("ofport", of_port, "Local OpenFlow port")->required();
    app.add_option("ovsdbport", odb_port, "Local OVSDB port")->required();
    app.add_option("--local-ip", local_ip, "Address the daemon sockets bind to");
    app.add_option("--session-file", session_file, "Session ticket for 0-RTT");
    app.add_option("--metrics-out", metrics_out, "Counters as JSON, rewritten every second");
    app.add_option("--keylog", keylog, "Append traffic secrets here");
    app.add_option("--log-level", log_level);
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    return tools::guarded([&] {
        rt::PosixRuntime rt;
        agent::ClientConfig cfg;
        cfg.server = {parse_ip(addr), port};
        cfg.local_ip = parse_ip(local_ip);
        cfg.quic_local = {cfg.local_ip, 0};
        cfg.openflow_port = of_port;
        cfg.ovsdb_port = odb_port;
        if (!session_file.empty()) cfg.session_file = session_file;
        if (!keylog.empty()) cfg.keylog = tools::keylog_file(keylog);
        agent::AgentClient client(rt, cfg);

        rt::Timer metrics(rt);
        std::function<void()> dump = [&] {
            auto c = client.counters();
            nlohmann::json j = {{"established", client.established()},
                                {"local_received", c.local_received},
                                {"local_dropped", c.local_dropped},
                                {"records_written", c.records_written},
                                {"remote_messages", c.remote_messages},
                                {"remote_bytes", c.remote_bytes},
                                {"undeliverable", c.undeliverable},
                                {"reconnects", c.reconnects},
                                {"migrations", c.migrations}};
            if (auto* conn = client.connection()) {
                j["bytes_sent"] = conn->stats().bytes_sent;
                j["datagrams_sent"] = conn->stats().datagrams_sent;
            }
            std::ofstream(metrics_out) << j.dump(2) << '\n';
            metrics.arm(rt.now() + std::chrono::seconds(1), dump);
        };
        if (!metrics_out.empty()) dump();
        spdlog::info("client up: daemons on {}:{} and {}:{}, server {}", local_ip, of_port, local_ip, odb_port,
                     cfg.server.to_string());
        tools::run_forever(rt);
        if (!metrics_out.empty()) {
            metrics.cancel();
            dump();
            metrics.cancel();
        }
        client.shutdown();
        rt.run_for(std::chrono::milliseconds(50));
        return 0;
    });
}
