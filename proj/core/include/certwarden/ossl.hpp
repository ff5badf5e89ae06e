#pragma once

#include <chrono>
#include <memory>
#include <stdexcept>
#include <string>

#include <openssl/evp.h>
#include <openssl/ssl.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>

#include "certwarden/bytes.hpp"

namespace certwarden {

/// Thrown for failures inside libcrypto/libssl. The message carries the
/// drained OpenSSL error queue.
class CryptoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] void throw_crypto_error(const std::string& what);

/// Drains the thread's OpenSSL error queue into a string.
std::string drain_openssl_errors();

namespace detail {
template <typename T, void (*Free)(T*)>
struct OsslDeleter {
  void operator()(T* p) const noexcept { Free(p); }
};
inline void free_x509_stack(STACK_OF(X509) * s) { sk_X509_pop_free(s, X509_free); }
}  // namespace detail

using X509Ptr = std::unique_ptr<X509, detail::OsslDeleter<X509, X509_free>>;
using X509NamePtr = std::unique_ptr<X509_NAME, detail::OsslDeleter<X509_NAME, X509_NAME_free>>;
using EvpPkeyPtr = std::unique_ptr<EVP_PKEY, detail::OsslDeleter<EVP_PKEY, EVP_PKEY_free>>;
using X509StorePtr = std::unique_ptr<X509_STORE, detail::OsslDeleter<X509_STORE, X509_STORE_free>>;
using X509StoreCtxPtr =
    std::unique_ptr<X509_STORE_CTX, detail::OsslDeleter<X509_STORE_CTX, X509_STORE_CTX_free>>;
using X509StackPtr = std::unique_ptr<STACK_OF(X509), detail::OsslDeleter<STACK_OF(X509), detail::free_x509_stack>>;
using SslCtxPtr = std::unique_ptr<SSL_CTX, detail::OsslDeleter<SSL_CTX, SSL_CTX_free>>;
using SslPtr = std::unique_ptr<SSL, detail::OsslDeleter<SSL, SSL_free>>;
using BioPtr = std::unique_ptr<BIO, detail::OsslDeleter<BIO, BIO_free_all>>;
using CipherCtxPtr =
    std::unique_ptr<EVP_CIPHER_CTX, detail::OsslDeleter<EVP_CIPHER_CTX, EVP_CIPHER_CTX_free>>;
using GeneralNamesPtr =
    std::unique_ptr<GENERAL_NAMES, detail::OsslDeleter<GENERAL_NAMES, GENERAL_NAMES_free>>;

/// Takes a new reference; the returned owner is independent of `x`.
X509Ptr share(X509* x);
EvpPkeyPtr share(EVP_PKEY* k);

Bytes x509_to_der(const X509* cert);
/// Returns null on malformed input or trailing bytes.
X509Ptr x509_from_der(ByteView der);
std::string x509_to_pem(const X509* cert);
X509Ptr x509_from_pem(std::string_view pem);
std::string private_key_to_pem(EVP_PKEY* key);
EvpPkeyPtr private_key_from_pem(std::string_view pem);

/// RFC 2253 rendering, for logs and diagnostics.
std::string name_to_string(const X509_NAME* name);
Bytes name_to_der(const X509_NAME* name);
/// Value of the first entry with the given NID, or empty.
std::string name_entry(const X509_NAME* name, int nid);

std::chrono::system_clock::time_point asn1_time_to_time_point(const ASN1_TIME* t);

/// HMAC-SHA256.
Bytes hmac_sha256(ByteView key, ByteView data);
Bytes sha256(ByteView data);

/// Fills `n` bytes from the OpenSSL CSPRNG.
Bytes random_bytes(std::size_t n);

}  // namespace certwarden
