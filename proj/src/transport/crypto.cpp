#include "quicsb/transport/crypto.hpp"

#include <cstdio>

#include <openssl/core_names.h>
#include <openssl/ec.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/kdf.h>
#include <openssl/pem.h>
#include <openssl/rand.h>
#include <openssl/x509.h>

namespace quicsb::transport::crypto {
namespace {

struct CtxFree {
    void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
    void operator()(EVP_PKEY_CTX* c) const { EVP_PKEY_CTX_free(c); }
    void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
    void operator()(X509* c) const { X509_free(c); }
    void operator()(BIO* b) const { BIO_free(b); }
    void operator()(EVP_KDF_CTX* c) const { EVP_KDF_CTX_free(c); }
};
template <typename T>
using Owned = std::unique_ptr<T, CtxFree>;

[[noreturn]] void fail(const char* what) { throw Error(Errc::Io, std::string("crypto: ") + what); }

Bytes hkdf(int mode, ByteView salt, ByteView key, ByteView info, size_t len) {
    EVP_KDF* kdf = EVP_KDF_fetch(nullptr, "HKDF", nullptr);
    if (!kdf) fail("HKDF unavailable");
    Owned<EVP_KDF_CTX> ctx(EVP_KDF_CTX_new(kdf));
    EVP_KDF_free(kdf);
    OSSL_PARAM params[6];
    int n = 0;
    char digest[] = "SHA256";
    params[n++] = OSSL_PARAM_construct_utf8_string(OSSL_KDF_PARAM_DIGEST, digest, 0);
    params[n++] = OSSL_PARAM_construct_int(OSSL_KDF_PARAM_MODE, &mode);
    params[n++] = OSSL_PARAM_construct_octet_string(OSSL_KDF_PARAM_KEY, const_cast<uint8_t*>(key.data()), key.size());
    if (!salt.empty()) {
        params[n++] =
            OSSL_PARAM_construct_octet_string(OSSL_KDF_PARAM_SALT, const_cast<uint8_t*>(salt.data()), salt.size());
    }
    if (!info.empty()) {
        params[n++] =
            OSSL_PARAM_construct_octet_string(OSSL_KDF_PARAM_INFO, const_cast<uint8_t*>(info.data()), info.size());
    }
    params[n] = OSSL_PARAM_construct_end();
    Bytes out(len);
    if (EVP_KDF_derive(ctx.get(), out.data(), out.size(), params) != 1) fail("HKDF derive");
    return out;
}

}  // namespace

void PkeyDeleter::operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }

Bytes random_bytes(size_t n) {
    Bytes out(n);
    if (n && RAND_bytes(out.data(), static_cast<int>(n)) != 1) fail("RAND_bytes");
    return out;
}

Bytes sha256(ByteView data) {
    Bytes out(kHashLen);
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1) fail("digest");
    return out;
}

Bytes hmac_sha256(ByteView key, ByteView data) {
    Bytes out(kHashLen);
    unsigned int len = 0;
    if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(), out.data(), &len)) {
        fail("hmac");
    }
    return out;
}

Bytes hkdf_extract(ByteView salt, ByteView ikm) {
    Bytes zero_salt(kHashLen, 0);
    Bytes zero_ikm(kHashLen, 0);
    return hkdf(EVP_KDF_HKDF_MODE_EXTRACT_ONLY, salt.empty() ? ByteView(zero_salt) : salt,
                ikm.empty() ? ByteView(zero_ikm) : ikm, {}, kHashLen);
}

Bytes hkdf_expand(ByteView prk, ByteView info, size_t len) {
    return hkdf(EVP_KDF_HKDF_MODE_EXPAND_ONLY, {}, prk, info, len);
}

Bytes hkdf_expand_label(ByteView secret, std::string_view label, ByteView context, size_t len) {
    ByteWriter info;
    info.u16(static_cast<uint16_t>(len));
    std::string full = "tls13 " + std::string(label);
    info.u8(static_cast<uint8_t>(full.size()));
    info.bytes(as_bytes(full));
    info.u8(static_cast<uint8_t>(context.size()));
    info.bytes(context);
    return hkdf_expand(secret, info.buf(), len);
}

Bytes derive_secret(ByteView secret, std::string_view label, ByteView transcript_hash) {
    return hkdf_expand_label(secret, label, transcript_hash, kHashLen);
}

Aead Aead::from_secret(ByteView secret) {
    return Aead(hkdf_expand_label(secret, "quic key", {}, kKeyLen), hkdf_expand_label(secret, "quic iv", {}, kIvLen));
}

std::array<uint8_t, kIvLen> Aead::nonce(uint64_t pn) const {
    std::array<uint8_t, kIvLen> n{};
    std::copy(iv_.begin(), iv_.end(), n.begin());
    for (int i = 0; i < 8; ++i) n[kIvLen - 1 - i] ^= static_cast<uint8_t>(pn >> (8 * i));
    return n;
}

Bytes Aead::seal(uint64_t pn, ByteView aad, ByteView plaintext) const {
    if (key_.size() != kKeyLen) throw Error(Errc::KeysUnavailable, "no packet protection keys");
    Owned<EVP_CIPHER_CTX> ctx(EVP_CIPHER_CTX_new());
    auto iv = nonce(pn);
    int len = 0;
    Bytes out(plaintext.size() + kTagLen);
    if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, key_.data(), iv.data()) != 1 ||
        EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) != 1 ||
        EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(), static_cast<int>(plaintext.size())) != 1 ||
        EVP_EncryptFinal_ex(ctx.get(), out.data() + len, &len) != 1 ||
        EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagLen, out.data() + plaintext.size()) != 1) {
        fail("seal");
    }
    return out;
}

Bytes Aead::open(uint64_t pn, ByteView aad, ByteView ciphertext) const {
    if (key_.size() != kKeyLen) throw Error(Errc::KeysUnavailable, "no packet protection keys");
    if (ciphertext.size() < kTagLen) throw Error(Errc::AuthenticationFailed, "ciphertext shorter than tag");
    Owned<EVP_CIPHER_CTX> ctx(EVP_CIPHER_CTX_new());
    auto iv = nonce(pn);
    const size_t body = ciphertext.size() - kTagLen;
    Bytes out(body);
    int len = 0;
    Bytes tag(ciphertext.end() - kTagLen, ciphertext.end());
    bool ok = EVP_DecryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, key_.data(), iv.data()) == 1 &&
              EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) == 1 &&
              EVP_DecryptUpdate(ctx.get(), out.data(), &len, ciphertext.data(), static_cast<int>(body)) == 1 &&
              EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagLen, tag.data()) == 1 &&
              EVP_DecryptFinal_ex(ctx.get(), out.data() + len, &len) == 1;
    if (!ok) throw Error(Errc::AuthenticationFailed, "AEAD tag mismatch");
    return out;
}

X25519 X25519::generate() {
    Owned<EVP_PKEY_CTX> ctx(EVP_PKEY_CTX_new_id(EVP_PKEY_X25519, nullptr));
    EVP_PKEY* raw = nullptr;
    if (EVP_PKEY_keygen_init(ctx.get()) != 1 || EVP_PKEY_keygen(ctx.get(), &raw) != 1) fail("x25519 keygen");
    Pkey key(raw);
    X25519 out;
    size_t len = 32;
    out.private_key.resize(len);
    out.public_key.resize(len);
    EVP_PKEY_get_raw_private_key(key.get(), out.private_key.data(), &len);
    len = 32;
    EVP_PKEY_get_raw_public_key(key.get(), out.public_key.data(), &len);
    return out;
}

Bytes X25519::shared_secret(ByteView peer_public) const {
    if (peer_public.size() != 32) throw Error(Errc::ProtocolViolation, "bad key share length");
    Pkey mine(EVP_PKEY_new_raw_private_key(EVP_PKEY_X25519, nullptr, private_key.data(), private_key.size()));
    Pkey peer(EVP_PKEY_new_raw_public_key(EVP_PKEY_X25519, nullptr, peer_public.data(), peer_public.size()));
    if (!mine || !peer) throw Error(Errc::ProtocolViolation, "bad key share");
    Owned<EVP_PKEY_CTX> ctx(EVP_PKEY_CTX_new(mine.get(), nullptr));
    size_t len = 32;
    Bytes out(len);
    if (EVP_PKEY_derive_init(ctx.get()) != 1 || EVP_PKEY_derive_set_peer(ctx.get(), peer.get()) != 1 ||
        EVP_PKEY_derive(ctx.get(), out.data(), &len) != 1) {
        throw Error(Errc::ProtocolViolation, "key agreement failed");
    }
    return out;
}

namespace {

const EVP_MD* digest_for(EVP_PKEY* key) {
    int id = EVP_PKEY_get_base_id(key);
    return (id == EVP_PKEY_ED25519 || id == EVP_PKEY_ED448) ? nullptr : EVP_sha256();
}

Owned<BIO> open_file(const std::filesystem::path& p) {
    Owned<BIO> bio(BIO_new_file(p.c_str(), "r"));
    if (!bio) throw Error(Errc::BadCredentials, "cannot open " + p.string());
    return bio;
}

}  // namespace

Credentials Credentials::load(const std::filesystem::path& key_pem, const std::filesystem::path& cert_pem) {
    Credentials c;
    auto kb = open_file(key_pem);
    c.key.reset(PEM_read_bio_PrivateKey(kb.get(), nullptr, nullptr, nullptr));
    if (!c.key) throw Error(Errc::BadCredentials, "cannot parse private key " + key_pem.string());
    auto cb = open_file(cert_pem);
    Owned<X509> cert(PEM_read_bio_X509(cb.get(), nullptr, nullptr, nullptr));
    if (!cert) throw Error(Errc::BadCredentials, "cannot parse certificate " + cert_pem.string());
    if (X509_check_private_key(cert.get(), c.key.get()) != 1) {
        throw Error(Errc::BadCredentials, "private key does not match certificate");
    }
    int len = i2d_X509(cert.get(), nullptr);
    c.certificate_der.resize(static_cast<size_t>(len));
    uint8_t* p = c.certificate_der.data();
    i2d_X509(cert.get(), &p);
    return c;
}

Bytes Credentials::sign(ByteView message) const {
    Owned<EVP_MD_CTX> ctx(EVP_MD_CTX_new());
    size_t len = 0;
    if (EVP_DigestSignInit(ctx.get(), nullptr, digest_for(key.get()), nullptr, key.get()) != 1 ||
        EVP_DigestSign(ctx.get(), nullptr, &len, message.data(), message.size()) != 1) {
        fail("sign init");
    }
    Bytes sig(len);
    if (EVP_DigestSign(ctx.get(), sig.data(), &len, message.data(), message.size()) != 1) fail("sign");
    sig.resize(len);
    return sig;
}

bool verify_with_certificate(ByteView certificate_der, ByteView message, ByteView signature) {
    const uint8_t* p = certificate_der.data();
    Owned<X509> cert(d2i_X509(nullptr, &p, static_cast<long>(certificate_der.size())));
    if (!cert) return false;
    Pkey key(X509_get_pubkey(cert.get()));
    if (!key) return false;
    Owned<EVP_MD_CTX> ctx(EVP_MD_CTX_new());
    return EVP_DigestVerifyInit(ctx.get(), nullptr, digest_for(key.get()), nullptr, key.get()) == 1 &&
           EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), message.data(), message.size()) == 1;
}

void write_self_signed(const std::filesystem::path& key_pem, const std::filesystem::path& cert_pem,
                       const std::string& common_name) {
    Pkey key(EVP_EC_gen("P-256"));
    if (!key) fail("ec keygen");
    Owned<X509> cert(X509_new());
    X509_set_version(cert.get(), 2);
    ASN1_INTEGER_set(X509_get_serialNumber(cert.get()), 1);
    X509_gmtime_adj(X509_getm_notBefore(cert.get()), 0);
    X509_gmtime_adj(X509_getm_notAfter(cert.get()), 365L * 24 * 3600);
    X509_set_pubkey(cert.get(), key.get());
    X509_NAME* name = X509_get_subject_name(cert.get());
    X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>(common_name.c_str()),
                               -1, -1, 0);
    X509_set_issuer_name(cert.get(), name);
    if (X509_sign(cert.get(), key.get(), EVP_sha256()) == 0) fail("x509 sign");

    Owned<BIO> kb(BIO_new_file(key_pem.c_str(), "w"));
    Owned<BIO> cb(BIO_new_file(cert_pem.c_str(), "w"));
    if (!kb || !cb) throw Error(Errc::Io, "cannot write credentials");
    if (PEM_write_bio_PrivateKey(kb.get(), key.get(), nullptr, nullptr, 0, nullptr, nullptr) != 1 ||
        PEM_write_bio_X509(cb.get(), cert.get()) != 1) {
        fail("pem write");
    }
}

}  // namespace quicsb::transport::crypto
