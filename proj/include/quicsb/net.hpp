#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace quicsb {

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;
using Duration = Clock::duration;

/// IPv4 endpoint; ip in host byte order.
struct SocketAddr {
    uint32_t ip = 0;
    uint16_t port = 0;

    auto operator<=>(const SocketAddr&) const = default;
    std::string to_string() const;
    std::string ip_string() const;
};

SocketAddr make_addr(uint8_t a, uint8_t b, uint8_t c, uint8_t d, uint16_t port);
/// Parses "a.b.c.d:port". Throws InvalidConfig.
SocketAddr parse_addr(std::string_view text);
/// Parses a dotted quad. Throws InvalidConfig.
uint32_t parse_ip(std::string_view text);

inline double to_seconds(Duration d) { return std::chrono::duration<double>(d).count(); }

}  // namespace quicsb
