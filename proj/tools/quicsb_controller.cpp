// quicsb-controller: emulated controller apps with an optional periodic
// workload.

#include <CLI11.hpp>

#include "common.hpp"
#include "quicsb/endpoints.hpp"

using namespace quicsb;

namespace {

/// Calls fn per_second times a second while the controller is connected.
class Ticker {
  public:
    Ticker(rt::Runtime& rt, double per_second, std::function<void()> fn) : rt_(rt), timer_(rt), fn_(std::move(fn)) {
        if (per_second <= 0) return;
        period_ = std::chrono::duration_cast<Duration>(std::chrono::duration<double>(1.0 / per_second));
        arm();
    }

  private:
    void arm() {
        timer_.arm(rt_.now() + period_, [this] {
            fn_();
            arm();
        });
    }

    rt::Runtime& rt_;
    rt::Timer timer_;
    std::function<void()> fn_;
    Duration period_{};
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quicsb-controller: emulated controller"};
    uint16_t of_port = 6653, odb_port = 6640;
    std::string scheme = "udp", listen_ip = "127.0.0.1", log_level = "info";
    double flow_rate = 0, stats_interval = 0, queue_rate = 0;
    app.add_option("--ofp-listen-port", of_port);
    app.add_option("--ovsdb-listen-port", odb_port);
    app.add_option("--scheme", scheme, "udp (behind an agent) or tcp")->check(CLI::IsMember({"udp", "tcp"}));
    app.add_option("--listen-ip", listen_ip);
    app.add_option("--flow-mods-per-second", flow_rate);
    app.add_option("--queue-configs-per-second", queue_rate);
    app.add_option("--stats-interval", stats_interval, "Seconds between flow stats polls");
    app.add_option("--log-level", log_level);
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    return tools::guarded([&] {
        rt::PosixRuntime rt;
        endpoints::ControllerConfig cfg;
        auto spec = [&](uint16_t port) {
            return endpoints::TransportSpec::parse(scheme + ":" + listen_ip + ":" + std::to_string(port));
        };
        cfg.openflow = spec(of_port);
        cfg.ovsdb = spec(odb_port);
        endpoints::ControllerEmulator ctl(rt, cfg);
        ctl.set_keep_log(false);

        uint64_t queue_id = 0;
        Ticker flows(rt, flow_rate, [&] {
            if (ctl.active()) ctl.send_flow_mods(1);
        });
        Ticker queues(rt, queue_rate, [&] {
            if (ctl.active()) ctl.send_queue_transact(++queue_id, {1'000'000, 10'000'000});
        });
        Ticker stats(rt, stats_interval > 0 ? 1.0 / stats_interval : 0, [&] {
            if (ctl.active()) ctl.poll_stats();
        });
        tools::run_forever(rt);
        auto& c = ctl.counters();
        spdlog::info("flow_mods_sent={} barriers={} stats_replies={} updates={} xid_mismatch={}", c.flow_mods_sent,
                     c.barriers_received, c.stats_replies_received, c.updates_received, c.xid_mismatch);
        return 0;
    });
}
