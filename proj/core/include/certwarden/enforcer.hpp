#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>

#include "certwarden/cert_authority.hpp"
#include "certwarden/chain_model.hpp"
#include "certwarden/net.hpp"
#include "certwarden/oracle_server.hpp"
#include "certwarden/tls.hpp"

namespace certwarden {

/// Pinned client for the chain oracle. The TLS session is accepted only if
/// the oracle's leaf is byte-identical to the keystore certificate, and only
/// the target URL and method are sent.
class OracleClient {
 public:
  enum class Failure { PinMismatch, Unreachable };

  struct Result {
    std::optional<CertificateChain> chain;
    std::optional<Failure> failure;
    std::string detail;
  };

  OracleClient(Endpoint oracle, PinnedKeystore pin, std::shared_ptr<const Dialer> dialer,
               std::chrono::milliseconds timeout = std::chrono::seconds(10));

  Result fetch(const HttpsUrl& target, std::string_view method = "GET") const;
  const Endpoint& endpoint() const { return oracle_; }

 private:
  Endpoint oracle_;
  PinnedKeystore pin_;
  std::shared_ptr<const Dialer> dialer_;
  std::chrono::milliseconds timeout_;
};

enum class EnforcementAction {
  Forwarded,
  BlockedMismatch,
  BlockedOracleUnreachable,
  BlockedPinFailure,
  /// The direct fetch or the forwarding session could not be opened.
  BlockedUpstreamUnreachable,
  /// Chains agree but the upstream does not validate against system trust.
  BlockedUntrustedUpstream,
};

std::string_view to_string(EnforcementAction action);

struct EnforcementResult {
  std::optional<ChainComparison> comparison;
  bool oracle_pin_ok = false;
  bool upstream_trusted = false;
  EnforcementAction action = EnforcementAction::BlockedUpstreamUnreachable;
  bool from_cache = false;
  std::string diagnostic;

  bool forwarded() const { return action == EnforcementAction::Forwarded; }
};

struct EnforcerOptions {
  std::chrono::milliseconds direct_timeout{10000};
  std::chrono::milliseconds cache_ttl = std::chrono::minutes(10);
  bool cache_enabled = true;
  /// Roots the forwarding session must validate against.
  TrustStore upstream_trust = TrustStore::system_default();
  std::function<SteadyClock::time_point()> clock = [] { return SteadyClock::now(); };
};

/// Compares the chain fetched directly with the chain the oracle sees, and
/// opens the forwarding session only when both agree.
///
/// A new host costs one direct fetch plus one oracle fetch. Within the cache
/// TTL neither is repeated; the forwarding session's own chain is compared
/// against the cached one instead. A host that ever mismatched is never
/// cached again.
class Enforcer {
 public:
  Enforcer(std::shared_ptr<const Dialer> upstream_dialer, std::shared_ptr<const OracleClient> oracle,
           EnforcerOptions options = {});

  struct Session {
    EnforcementResult result;
    /// Validated upstream TLS session, set iff result.forwarded().
    std::unique_ptr<TlsStream> upstream;
  };

  /// Full enforcement ending in a forwarding session toward `target`.
  Session enforce(const HttpsUrl& target, std::string_view method = "GET");

  /// Comparison only, for flows relayed without terminating their TLS.
  EnforcementResult check(const HttpsUrl& target, std::string_view method = "GET");

  std::uint64_t direct_fetches() const { return direct_fetches_.load(); }
  std::uint64_t oracle_fetches() const { return oracle_fetches_.load(); }
  void reset_counters();
  void clear_cache();
  void set_cache_enabled(bool on);
  bool poisoned(const Endpoint& target) const;

 private:
  struct CacheEntry {
    CertificateChain chain;
    SteadyClock::time_point expires;
  };

  /// Direct + oracle fetch and comparison. Fills `oracle_chain` on success.
  EnforcementResult compare_fresh(const HttpsUrl& target, std::string_view method,
                                  std::optional<CertificateChain>& oracle_chain);
  std::optional<CertificateChain> cached(const Endpoint& target);
  void remember(const Endpoint& target, const CertificateChain& chain);
  void poison(const Endpoint& target);

  std::shared_ptr<const Dialer> dialer_;
  std::shared_ptr<const OracleClient> oracle_;
  EnforcerOptions options_;
  std::atomic<std::uint64_t> direct_fetches_{0};
  std::atomic<std::uint64_t> oracle_fetches_{0};
  mutable std::mutex cache_mu_;
  std::map<Endpoint, CacheEntry> cache_;
  std::set<Endpoint> poisoned_;
  bool cache_enabled_;
};

}  // namespace certwarden
