#include "quicsb/bytes.hpp"

namespace quicsb {

std::string to_hex(ByteView b) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(b.size() * 2);
    for (uint8_t c : b) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0x0f]);
    }
    return out;
}

Bytes from_hex(std::string_view hex) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (hex.size() % 2 != 0) throw Error(Errc::ParseError, "odd-length hex string");
    Bytes out;
    out.reserve(hex.size() / 2);
    for (size_t i = 0; i < hex.size(); i += 2) {
        int hi = nibble(hex[i]);
        int lo = nibble(hex[i + 1]);
        if (hi < 0 || lo < 0) throw Error(Errc::ParseError, "bad hex digit");
        out.push_back(static_cast<uint8_t>(hi << 4 | lo));
    }
    return out;
}

size_t varint_size(uint64_t v) {
    if (v < (1u << 6)) return 1;
    if (v < (1u << 14)) return 2;
    if (v < (1u << 30)) return 4;
    if (v <= kVarintMax) return 8;
    throw Error(Errc::InvalidParams, "varint out of range");
}

void ByteWriter::varint(uint64_t v) {
    switch (varint_size(v)) {
        case 1: u8(static_cast<uint8_t>(v)); break;
        case 2: u16(static_cast<uint16_t>(v | 0x4000)); break;
        case 4: u32(static_cast<uint32_t>(v | 0x80000000u)); break;
        default: u64(v | 0xc000000000000000ull); break;
    }
}

uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}

uint16_t ByteReader::u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_] << 8 | data_[pos_ + 1]);
    pos_ += 2;
    return v;
}

uint32_t ByteReader::u24() {
    need(3);
    uint32_t v = uint32_t{data_[pos_]} << 16 | uint32_t{data_[pos_ + 1]} << 8 | data_[pos_ + 2];
    pos_ += 3;
    return v;
}

uint32_t ByteReader::u32() {
    uint32_t hi = u16();
    return hi << 16 | u16();
}

uint64_t ByteReader::u64() {
    uint64_t hi = u32();
    return hi << 32 | u32();
}

uint64_t ByteReader::varint() {
    need(1);
    size_t len = size_t{1} << (data_[pos_] >> 6);
    need(len);
    uint64_t v = data_[pos_] & 0x3f;
    for (size_t i = 1; i < len; ++i) v = v << 8 | data_[pos_ + i];
    pos_ += len;
    return v;
}

ByteView ByteReader::bytes(size_t n) {
    need(n);
    ByteView out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
}

ByteView ByteReader::rest() { return bytes(remaining()); }

}  // namespace quicsb
