#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "certwarden/cert_authority.hpp"
#include "certwarden/proxy_core.hpp"

namespace certwarden {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Process exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitConfig = 2, kExitExpectation = 3 };

struct Config {
  using Ms = std::chrono::milliseconds;

  std::filesystem::path data_dir = ".";

  std::string proxy_host = "127.0.0.1";
  std::uint16_t proxy_port = 8080;
  std::string admin_bind = "127.0.0.1:8081";

  std::string oracle_endpoint = "https://127.0.0.1:8443";
  std::string oracle_bind = "127.0.0.1:8443";
  int oracle_rate_limit = 60;

  PolicyMode mode = PolicyMode::Automatic;
  std::set<std::string> manual_selection;
  Ms pending_timeout{30000};

  std::filesystem::path store_path = "whitelist.db";
  std::filesystem::path store_key_file = "store.key";
  std::filesystem::path keystore_path = "oracle.keystore";
  std::filesystem::path keystore_key_file = "keystore.key";
  std::filesystem::path ca_cert = "ca.pem";
  std::filesystem::path ca_key = "ca.key";
  std::filesystem::path oracle_cert = "oracle.pem";
  std::filesystem::path oracle_key = "oracle.key";
  std::filesystem::path verdict_log = "verdicts.jsonl";
  std::filesystem::path event_log;
  /// Extra PEM roots the forwarding session trusts besides the system set.
  std::filesystem::path extra_trust;

  KeyProfile key_profile = KeyProfile::EcP256;
  int ca_validity_days = 365;

  Ms cache_ttl{600000};
  Ms decision_window{5000};
  Ms oracle_timeout{10000};
  Ms direct_timeout{10000};
  Ms idle_timeout{30000};

  /// Process name -> version, for clients identified through procfs.
  std::map<std::string, std::string> client_versions;

  friend bool operator==(const Config&, const Config&) = default;

  /// Relative paths are taken relative to data_dir.
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  Endpoint admin_endpoint() const;
  Endpoint oracle_bind_endpoint() const;
};

/// Every key accepted in files, flags (--set key=value) and environment
/// variables (CERTWARDEN_<KEY in upper case>).
std::vector<std::string> config_keys();

/// "key = value" lines, '#' comments. Values may be double-quoted with
/// \" and \\ escapes. Unknown keys and bad values throw ConfigError.
Config parse_config(std::string_view text, Config base = {});
std::string render_config(const Config& config);

/// Sets one key. Throws ConfigError.
void apply_setting(Config& config, std::string_view key, std::string_view value);

/// Throws ConfigError when the configuration is inconsistent.
void validate(const Config& config);

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
EnvLookup process_env();

/// File (if it exists), then flags, then environment; validated.
Config load_config(const std::filesystem::path& file, const std::map<std::string, std::string>& flags,
                   const EnvLookup& env = process_env());

}  // namespace certwarden
