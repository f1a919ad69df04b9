#pragma once

// Thin wrappers over OpenSSL libcrypto: SHA-256, HKDF, AES-128-GCM, X25519
// and certificate-backed signatures.

#include <array>
#include <filesystem>
#include <memory>
#include <string>

#include "quicsb/bytes.hpp"

typedef struct evp_pkey_st EVP_PKEY;

namespace quicsb::transport::crypto {

constexpr size_t kHashLen = 32;
constexpr size_t kKeyLen = 16;
constexpr size_t kIvLen = 12;
constexpr size_t kTagLen = 16;

Bytes random_bytes(size_t n);
Bytes sha256(ByteView data);
Bytes hmac_sha256(ByteView key, ByteView data);

Bytes hkdf_extract(ByteView salt, ByteView ikm);
Bytes hkdf_expand(ByteView prk, ByteView info, size_t len);
/// TLS 1.3 HKDF-Expand-Label with the "tls13 " prefix.
Bytes hkdf_expand_label(ByteView secret, std::string_view label, ByteView context, size_t len);
/// Derive-Secret(secret, label, transcript hash).
Bytes derive_secret(ByteView secret, std::string_view label, ByteView transcript_hash);

/// AES-128-GCM with a 96-bit nonce built as iv XOR packet number.
class Aead {
  public:
    Aead() = default;
    Aead(Bytes key, Bytes iv) : key_(std::move(key)), iv_(std::move(iv)) {}
    /// Packet protection keys ("quic key", "quic iv") from a traffic secret.
    static Aead from_secret(ByteView secret);

    Bytes seal(uint64_t pn, ByteView aad, ByteView plaintext) const;
    /// Throws AuthenticationFailed on tag mismatch.
    Bytes open(uint64_t pn, ByteView aad, ByteView ciphertext) const;

    const Bytes& key() const { return key_; }
    const Bytes& iv() const { return iv_; }

  private:
    std::array<uint8_t, kIvLen> nonce(uint64_t pn) const;

    Bytes key_;
    Bytes iv_;
};

struct X25519 {
    Bytes private_key;
    Bytes public_key;

    static X25519 generate();
    Bytes shared_secret(ByteView peer_public) const;
};

struct PkeyDeleter {
    void operator()(EVP_PKEY* k) const;
};
using Pkey = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

/// Server credentials loaded from PEM files.
struct Credentials {
    Pkey key;
    Bytes certificate_der;

    /// Throws BadCredentials when either file is missing or does not parse,
    /// or when the key does not match the certificate.
    static Credentials load(const std::filesystem::path& key_pem, const std::filesystem::path& cert_pem);
    Bytes sign(ByteView message) const;
};

/// Verifies a signature made by the key in a DER certificate.
bool verify_with_certificate(ByteView certificate_der, ByteView message, ByteView signature);

/// Writes a fresh P-256 key and a self-signed certificate for common_name.
void write_self_signed(const std::filesystem::path& key_pem, const std::filesystem::path& cert_pem,
                       const std::string& common_name);

}  // namespace quicsb::transport::crypto
