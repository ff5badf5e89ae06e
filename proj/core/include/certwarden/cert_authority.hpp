#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "certwarden/ossl.hpp"
#include "certwarden/tls.hpp"

namespace certwarden {

using SystemTime = std::chrono::system_clock::time_point;

class CaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyProfile { EcP256, Rsa2048 };

/// "default", "ec-p256" or "rsa-2048".
std::optional<KeyProfile> parse_key_profile(std::string_view name);
std::string_view to_string(KeyProfile profile);

EvpPkeyPtr generate_key(KeyProfile profile);

/// DNS name (LDH labels, optional leading "*." wildcard label when
/// `allow_wildcard`) or an IPv4/IPv6 literal.
bool is_valid_host(std::string_view host, bool allow_wildcard = false);

struct CaOptions {
  int validity_days = 365;
  KeyProfile profile = KeyProfile::EcP256;
  std::string common_name = "certwarden Local CA";
  std::string organization = "certwarden";
  /// Fixes the serial sequence. Unset draws a random starting point.
  std::optional<std::uint64_t> seed;
  std::optional<SystemTime> now;
};

/// Fields mirrored from a genuine upstream leaf when forging.
struct UpstreamLeafInfo {
  X509NamePtr subject;
  SystemTime not_before{};
  SystemTime not_after{};
  std::vector<std::string> dns_names;
  std::vector<std::string> ip_addresses;

  static UpstreamLeafInfo from_certificate(const X509* cert);
};

struct ForgedLeaf {
  X509Ptr certificate;
  EvpPkeyPtr private_key;
  std::string target_host;
  /// Certificates sent after the leaf (issuer chain, without the root).
  std::vector<X509Ptr> chain;

  ServerIdentity identity() const;
};

/// A local certificate authority: self-signed root (or a subordinate of
/// another CertAuthority) plus an atomic serial counter. Copies share state;
/// forging is safe from any number of threads.
class CertAuthority {
 public:
  static CertAuthority generate(const CaOptions& options);
  /// Restores a CA from PEM. The serial counter restarts at a random point.
  static CertAuthority load(std::string_view certificate_pem, std::string_view key_pem);

  X509* certificate() const;
  EVP_PKEY* private_key() const;
  KeyProfile profile() const;
  std::string certificate_pem() const;
  std::string private_key_pem() const;
  SystemTime not_before() const;
  SystemTime not_after() const;
  bool valid_at(SystemTime t) const;

  /// Hands out the next serial. Strictly increasing within this CA.
  std::uint64_t next_serial() const;

  /// Leaf for `host`, signed by this CA. With `upstream`, subject and
  /// validity window are copied from the genuine leaf (CN is pinned to the
  /// host); otherwise the window is now-1h .. now+30d.
  /// Throws CaError on a malformed host or when the CA is outside its window.
  ForgedLeaf forge_leaf(std::string_view host, const UpstreamLeafInfo* upstream = nullptr,
                        std::optional<SystemTime> now = std::nullopt) const;

  /// forge_leaf through a per-host cache. Entries are reused while they
  /// remain inside their validity window.
  std::shared_ptr<const ForgedLeaf> forge_cached(std::string_view host,
                                                 std::optional<SystemTime> now = std::nullopt) const;

  /// Intermediate CA signed by this one.
  CertAuthority issue_subordinate(const std::string& common_name, int validity_days,
                                  std::optional<SystemTime> now = std::nullopt) const;

  /// Certificates above this CA, nearest first, root included. Empty for a root.
  const std::vector<X509Ptr>& issuer_chain() const;

 private:
  struct State;
  explicit CertAuthority(std::shared_ptr<State> state) : state_(std::move(state)) {}
  std::shared_ptr<State> state_;
};

class KeystoreError : public std::runtime_error {
 public:
  enum class Kind { Parse, Tampered };
  KeystoreError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// The oracle's exact leaf, authenticated by a keyed digest.
struct PinnedKeystore {
  X509Ptr oracle_certificate;
  Bytes oracle_der;
  std::array<std::uint8_t, 32> integrity_digest{};
};

/// Layout: u32 big-endian DER length, DER certificate, 32-byte HMAC-SHA256
/// over everything before it.
Bytes serialize_keystore(const X509* oracle_certificate, ByteView mac_key);

/// Checks the trailer MAC before parsing anything. Throws KeystoreError.
PinnedKeystore verify_keystore(ByteView store_bytes, ByteView mac_key);

}  // namespace certwarden
