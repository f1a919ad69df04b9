#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quicsb/error.hpp"

namespace quicsb {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const uint8_t*>(s.data()), s.size()};
}

inline std::string_view as_chars(ByteView b) {
    return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::string to_hex(ByteView b);
Bytes from_hex(std::string_view hex);

/// Append-only big-endian writer.
class ByteWriter {
  public:
    ByteWriter() = default;
    explicit ByteWriter(Bytes& out) : out_(&out) {}

    void u8(uint8_t v) { buf().push_back(v); }
    void u16(uint16_t v) {
        u8(static_cast<uint8_t>(v >> 8));
        u8(static_cast<uint8_t>(v));
    }
    void u24(uint32_t v) {
        u8(static_cast<uint8_t>(v >> 16));
        u16(static_cast<uint16_t>(v));
    }
    void u32(uint32_t v) {
        u16(static_cast<uint16_t>(v >> 16));
        u16(static_cast<uint16_t>(v));
    }
    void u64(uint64_t v) {
        u32(static_cast<uint32_t>(v >> 32));
        u32(static_cast<uint32_t>(v));
    }
    void bytes(ByteView b) { buf().insert(buf().end(), b.begin(), b.end()); }
    void zeros(size_t n) { buf().insert(buf().end(), n, 0); }
    /// QUIC variable-length integer (RFC 9000 section 16).
    void varint(uint64_t v);

    size_t size() const { return out_ ? out_->size() : own_.size(); }
    Bytes& buf() { return out_ ? *out_ : own_; }
    Bytes take() { return std::move(buf()); }

  private:
    Bytes own_;
    Bytes* out_ = nullptr;
};

/// Bounds-checked big-endian reader; throws Truncated on short input.
class ByteReader {
  public:
    explicit ByteReader(ByteView data) : data_(data) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u24();
    uint32_t u32();
    uint64_t u64();
    uint64_t varint();
    ByteView bytes(size_t n);
    ByteView rest();
    void skip(size_t n) { (void)bytes(n); }

    size_t remaining() const { return data_.size() - pos_; }
    size_t position() const { return pos_; }
    bool empty() const { return remaining() == 0; }

  private:
    void need(size_t n) const {
        if (remaining() < n) throw Error(Errc::Truncated, "input truncated");
    }

    ByteView data_;
    size_t pos_ = 0;
};

size_t varint_size(uint64_t v);
constexpr uint64_t kVarintMax = (uint64_t{1} << 62) - 1;

}  // namespace quicsb
