#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "certwarden/cert_authority.hpp"
#include "certwarden/net.hpp"
#include "certwarden/tls.hpp"
#include "certwarden/whitelist_store.hpp"

namespace certwarden {

enum class VerdictValue { Vulnerable, PenProof, Untested };

enum class Evidence { HandshakeCompletedWithAppData, HandshakeAborted, ConnectionClosedSilent, Timeout };

std::string_view to_string(VerdictValue v);
std::string_view to_string(Evidence e);
std::optional<VerdictValue> parse_verdict_value(std::string_view s);
std::optional<Evidence> parse_evidence(std::string_view s);

/// Vulnerable iff the evidence is app data after a completed handshake;
/// Untested carries no evidence.
struct Verdict {
  VerdictValue value = VerdictValue::Untested;
  std::optional<Evidence> evidence;
  SystemTime decided_at{};
  std::string detail;
};

struct PentestOutcome {
  Verdict verdict;
  /// The intercepted client session. Kept only for Vulnerable verdicts so
  /// the flow can continue under enforcement without a second handshake.
  std::unique_ptr<TlsStream> session;
  /// Application bytes already read from the client.
  Bytes first_bytes;
};

struct PentesterOptions {
  /// How long a completed handshake may stay silent before the client is
  /// classified PenProof/Timeout.
  std::chrono::milliseconds decision_window{5000};
  std::chrono::milliseconds handshake_timeout{10000};
  /// Mirror subject and validity from the genuine upstream leaf.
  bool mirror_upstream = false;
};

class Pentester {
 public:
  Pentester(CertAuthority ca, PentesterOptions options = {});

  /// Presents a leaf forged for `host` to the client on `client` and
  /// classifies the client from what it does next.
  PentestOutcome pentest(Socket client, const std::string& host, const UpstreamLeafInfo* upstream = nullptr);

  const PentesterOptions& options() const { return options_; }
  const CertAuthority& ca() const { return ca_; }

 private:
  CertAuthority ca_;
  PentesterOptions options_;
  SslCtxPtr ctx_;
};

struct VerdictRecord {
  std::string client;
  std::string version;
  VerdictValue verdict = VerdictValue::Untested;
  std::optional<Evidence> evidence;
  std::int64_t ts = 0;  // unix ms

  std::string to_json() const;
  static std::optional<VerdictRecord> from_json(std::string_view line);
};

/// Append-only verdict history, in memory and optionally as JSON lines.
class VerdictLog {
 public:
  VerdictLog() = default;
  explicit VerdictLog(std::filesystem::path path);

  void append(const VerdictRecord& record);
  std::vector<VerdictRecord> records() const;
  std::size_t size() const;

  /// Reads a log file written by append. Unparseable lines are skipped.
  static std::vector<VerdictRecord> load(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<VerdictRecord> records_;
};

/// PenProof clients go to the whitelist, every decided verdict to the log.
/// A failed store write keeps the entry pending; it is retried on the next
/// record call or by retry_pending.
class VerdictRecorder {
 public:
  VerdictRecorder(std::shared_ptr<WhitelistStore> store, std::shared_ptr<VerdictLog> log);

  /// Throws std::invalid_argument for Untested or an empty client name.
  void record(const ClientDescriptor& client, const Verdict& verdict);
  std::size_t retry_pending();
  std::size_t pending() const;

  WhitelistStore* store() const { return store_.get(); }
  VerdictLog* log() const { return log_.get(); }

 private:
  std::shared_ptr<WhitelistStore> store_;
  std::shared_ptr<VerdictLog> log_;
  mutable std::mutex mu_;
  std::vector<WhitelistEntry> pending_;
};

}  // namespace certwarden
