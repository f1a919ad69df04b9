// quicsb-server: controller-side agent. Streams from the client are
// delivered to the controller daemons at <daemon-ip>:<ofport>/<ovsdbport>.

#include <CLI11.hpp>

#include "common.hpp"
#include "quicsb/agent.hpp"

using namespace quicsb;

int main(int argc, char** argv) {
    CLI::App app{"quicsb-server: controller-side QUIC agent"};
    std::string addr, key, cert;
    uint16_t port = 0, of_port = 0, odb_port = 0;
    std::string daemon_ip = "127.0.0.1";
    std::string keylog, log_level = "info";
    app.add_option("addr", addr, "Listen address")->required();
    app.add_option("port", port, "Listen UDP port")->required();
    app.add_option("key", key, "PEM private key")->required();
    app.add_option("cert", cert, "PEM certificate")->required();
    app.add_option("ofport", of_port, "Controller OpenFlow port")->required();
    app.add_option("ovsdbport", odb_port, "Controller OVSDB port")->required();
    app.add_option("--daemon-ip", daemon_ip, "Where the controller daemons listen");
    app.add_option("--keylog", keylog, "Append traffic secrets here");
    app.add_option("--log-level", log_level);
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    return tools::guarded([&] {
        rt::PosixRuntime rt;
        agent::ServerConfig cfg;
        cfg.listen = {parse_ip(addr), port};
        cfg.key_file = key;
        cfg.cert_file = cert;
        cfg.daemon_ip = parse_ip(daemon_ip);
        cfg.openflow_port = of_port;
        cfg.ovsdb_port = odb_port;
        if (!keylog.empty()) cfg.keylog = tools::keylog_file(keylog);
        agent::AgentServer server(rt, cfg);
        spdlog::info("server listening on {}", server.local().to_string());
        tools::run_forever(rt);
        return 0;
    });
}
