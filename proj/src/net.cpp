#include "quicsb/net.hpp"

#include <arpa/inet.h>

#include <charconv>

#include "quicsb/error.hpp"

namespace quicsb {

std::string SocketAddr::ip_string() const {
    return std::to_string(ip >> 24) + "." + std::to_string((ip >> 16) & 0xff) + "." +
           std::to_string((ip >> 8) & 0xff) + "." + std::to_string(ip & 0xff);
}

std::string SocketAddr::to_string() const { return ip_string() + ":" + std::to_string(port); }

SocketAddr make_addr(uint8_t a, uint8_t b, uint8_t c, uint8_t d, uint16_t port) {
    return {(uint32_t{a} << 24) | (uint32_t{b} << 16) | (uint32_t{c} << 8) | d, port};
}

uint32_t parse_ip(std::string_view text) {
    in_addr a{};
    std::string s(text);
    if (inet_pton(AF_INET, s.c_str(), &a) != 1) throw Error(Errc::InvalidConfig, "bad IPv4 address: " + s);
    return ntohl(a.s_addr);
}

SocketAddr parse_addr(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) throw Error(Errc::InvalidConfig, "missing port: " + std::string(text));
    unsigned port = 0;
    auto p = text.substr(colon + 1);
    auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), port);
    if (ec != std::errc() || ptr != p.data() + p.size() || port > 65535) {
        throw Error(Errc::InvalidConfig, "bad port: " + std::string(text));
    }
    return {parse_ip(text.substr(0, colon)), static_cast<uint16_t>(port)};
}

}  // namespace quicsb
