// quicsb-switch: emulated switch daemons (OpenFlow and OVSDB).

#include <CLI11.hpp>

#include "common.hpp"
#include "quicsb/endpoints.hpp"

using namespace quicsb;

int main(int argc, char** argv) {
    CLI::App app{"quicsb-switch: emulated switch"};
    std::string controller, manager, local_ip = "127.0.0.1", log_level = "info";
    size_t flows = 0;
    double probe = 5;
    app.add_option("--controller", controller, "udp:<ip>:<port> or tcp:<ip>:<port>")->required();
    app.add_option("--manager", manager, "udp:<ip>:<port> or tcp:<ip>:<port>")->required();
    app.add_option("--local-ip", local_ip);
    app.add_option("--flows", flows, "Initial flow table size");
    app.add_option("--probe-interval", probe, "Seconds of silence before an echo probe; 0 disables");
    app.add_option("--log-level", log_level);
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    return tools::guarded([&] {
        rt::PosixRuntime rt;
        endpoints::SwitchConfig cfg;
        cfg.controller = endpoints::TransportSpec::parse(controller);
        cfg.manager = endpoints::TransportSpec::parse(manager);
        cfg.local_ip = parse_ip(local_ip);
        cfg.initial_flows = flows;
        cfg.probe_interval = std::chrono::duration_cast<Duration>(std::chrono::duration<double>(probe));
        endpoints::SwitchEmulator sw(rt, cfg);
        tools::run_forever(rt);
        auto& c = sw.counters();
        spdlog::info("flow_mods={} stats_requests={} queue_transacts={} echoes={}", c.flow_mods, c.stats_requests,
                     c.queue_transacts, c.echoes);
        return 0;
    });
}
