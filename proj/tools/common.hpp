#pragma once

#include <csignal>
#include <cstdio>
#include <fstream>
#include <memory>

#include <spdlog/spdlog.h>

#include "quicsb/bytes.hpp"
#include "quicsb/error.hpp"
#include "quicsb/runtime.hpp"
#include "quicsb/transport/connection.hpp"

namespace quicsb::tools {

inline rt::PosixRuntime* g_runtime = nullptr;

inline void on_signal(int) {
    if (g_runtime) g_runtime->stop();
}

/// Runs the loop until SIGINT or SIGTERM.
inline void run_forever(rt::PosixRuntime& rt) {
    g_runtime = &rt;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    rt.run_until([] { return false; }, TimePoint::max());
    g_runtime = nullptr;
}

/// Appends "LABEL cid secret" lines to a file.
inline transport::KeyLogger keylog_file(const std::string& path) {
    auto out = std::make_shared<std::ofstream>(path, std::ios::app);
    if (!*out) throw Error(Errc::Io, "cannot open key log " + path);
    return [out](std::string_view label, const Bytes& cid, const Bytes& secret) {
        *out << label << ' ' << to_hex(cid) << ' ' << to_hex(secret) << '\n';
        out->flush();
    };
}

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", std::string(to_string(e.code())).c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace quicsb::tools
