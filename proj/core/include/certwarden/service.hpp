#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "certwarden/admin_api.hpp"
#include "certwarden/cert_authority.hpp"
#include "certwarden/client_ident.hpp"
#include "certwarden/config.hpp"
#include "certwarden/enforcer.hpp"
#include "certwarden/events.hpp"
#include "certwarden/oracle_server.hpp"
#include "certwarden/pentester.hpp"
#include "certwarden/proxy_core.hpp"
#include "certwarden/whitelist_store.hpp"

namespace certwarden {

/// Environment variables that override the key files (64 hex characters).
inline constexpr char kStoreKeyEnv[] = "CERTWARDEN_STORE_KEY";
inline constexpr char kKeystoreKeyEnv[] = "CERTWARDEN_KEYSTORE_KEY";

/// 32-byte key from `env_var` if set, else from `file`. Throws ConfigError.
Bytes load_key(const std::filesystem::path& file, const std::string& env_var, const EnvLookup& env);

std::string read_text_file(const std::filesystem::path& path);
/// Write-temp-then-rename; `private_file` restricts the mode to 0600.
void write_text_file(const std::filesystem::path& path, std::string_view text, bool private_file = false);

/// Generates the CA, the oracle identity (a leaf for the oracle host signed
/// by the CA), the pinned keystore and both keys. Existing files are kept
/// unless `force`; throws ConfigError if any would be overwritten.
/// Returns the paths written.
std::vector<std::filesystem::path> init_material(const Config& config, bool force = false);

CertAuthority load_ca(const Config& config);
ServerIdentity load_oracle_identity(const Config& config);
/// Throws KeystoreError when the keystore fails its integrity check.
PinnedKeystore load_keystore(const Config& config, const EnvLookup& env = process_env());

/// Replaceable collaborators, for the lab and tests.
struct ServiceOverrides {
  std::shared_ptr<const Dialer> upstream_dialer;
  std::shared_ptr<const Dialer> oracle_dialer;
  std::shared_ptr<SocketResolver> resolver;
  std::shared_ptr<WhitelistStore> store;
  std::optional<TrustStore> upstream_trust;
  std::optional<PinnedKeystore> keystore;
};

/// The interception proxy with its admin API, assembled from a Config.
/// Construction refuses to proceed on a tampered keystore or store.
class ProxyService {
 public:
  explicit ProxyService(const Config& config, ServiceOverrides overrides = {},
                        const EnvLookup& env = process_env());
  ~ProxyService();
  ProxyService(const ProxyService&) = delete;
  ProxyService& operator=(const ProxyService&) = delete;

  void start();
  void stop();

  ProxyServer& proxy() { return *proxy_; }
  AdminApi& admin() { return *admin_; }
  Enforcer& enforcer() { return *enforcer_; }
  const std::shared_ptr<WhitelistStore>& store() const { return store_; }
  const std::shared_ptr<EventBus>& events() const { return events_; }
  const std::shared_ptr<PolicyState>& policy() const { return policy_; }
  const std::shared_ptr<DecisionQueue>& decisions() const { return decisions_; }
  const std::shared_ptr<VerdictLog>& verdicts() const { return verdicts_; }
  const CertAuthority& ca() const { return ca_; }

 private:
  CertAuthority ca_;
  std::shared_ptr<WhitelistStore> store_;
  std::shared_ptr<EventBus> events_;
  std::shared_ptr<PolicyState> policy_;
  std::shared_ptr<DecisionQueue> decisions_;
  std::shared_ptr<VerdictLog> verdicts_;
  std::shared_ptr<Enforcer> enforcer_;
  std::shared_ptr<JsonLinesFile> event_log_;
  std::unique_ptr<ProxyServer> proxy_;
  std::unique_ptr<AdminApi> admin_;
};

/// Oracle server from a Config (oracle_bind, oracle_cert/key, rate limit).
std::unique_ptr<OracleServer> make_oracle_server(const Config& config,
                                                 std::shared_ptr<const Dialer> dialer = nullptr);

}  // namespace certwarden
