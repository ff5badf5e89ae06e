#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "certwarden/admin_api.hpp"
#include "certwarden/cert_authority.hpp"
#include "certwarden/client_ident.hpp"
#include "certwarden/enforcer.hpp"
#include "certwarden/events.hpp"
#include "certwarden/net.hpp"
#include "certwarden/oracle_server.hpp"
#include "certwarden/pentester.hpp"
#include "certwarden/proxy_core.hpp"
#include "certwarden/whitelist_store.hpp"

namespace certwarden::sim {

namespace detail {
class TcpService;
}

/// How a synthetic client validates the server it talks to.
enum class Behavior {
  /// Accepts any certificate.
  Naive,
  /// Chain and host name validation against its trust store.
  Strict,
  /// Accepts exactly one leaf, byte for byte.
  Pinned,
};

std::string_view to_string(Behavior b);
std::optional<Behavior> parse_behavior(std::string_view s);
/// Naive -> Vulnerable; Strict, Pinned -> PenProof.
VerdictValue expected_verdict(Behavior b);

struct SyntheticClient {
  Behavior behavior = Behavior::Naive;
  std::string name;
  std::string version = "1.0";
};

/// Naive, Strict and Pinned clients with distinct names.
std::vector<SyntheticClient> default_clients();

struct ClientRequest {
  std::string method = "GET";
  std::string path = "/";
  std::string body;
};

struct ClientResult {
  std::uint16_t local_port = 0;
  /// The proxy answered the CONNECT with 200 (always true without a proxy).
  bool tunnel_open = false;
  bool handshake_ok = false;
  /// Issuer and subject of the leaf the client saw, one-line form.
  std::string leaf_issuer;
  std::string leaf_subject;
  bool request_sent = false;
  int status = 0;
  std::string response_body;
  std::string error;
  std::chrono::nanoseconds elapsed{0};
};

struct ClientContext {
  const Dialer* dialer = nullptr;
  /// CONNECT through this proxy when set; otherwise dial the target.
  std::optional<Endpoint> proxy;
  Endpoint target;
  /// Roots for Strict clients.
  const TrustStore* trust = nullptr;
  /// Leaf DER for Pinned clients.
  Bytes pin;
  /// When set, the client's source port is announced here before CONNECT.
  TableResolver* resolver = nullptr;
  std::chrono::milliseconds timeout{10000};
};

/// One HTTPS exchange. Never throws for network failures; they end up in
/// ClientResult::error.
ClientResult run_client(const SyntheticClient& client, const ClientContext& ctx, const ClientRequest& request = {});

struct UpstreamRequest {
  std::string method;
  std::string path;
  std::string body;
};

/// TLS origin server answering every request with 200 and a fixed body.
class UpstreamServer {
 public:
  UpstreamServer(ServerIdentity identity, std::string body = "welcome");
  ~UpstreamServer();
  UpstreamServer(const UpstreamServer&) = delete;
  UpstreamServer& operator=(const UpstreamServer&) = delete;

  void start();
  void stop();
  Endpoint endpoint() const;

  std::vector<UpstreamRequest> requests() const;
  void clear_requests();
  std::size_t handshakes() const { return handshakes_.load(); }

 private:
  void serve(Socket s);

  ServerIdentity identity_;
  std::string body_;
  SslCtxPtr ctx_;
  std::unique_ptr<detail::TcpService> service_;
  mutable std::mutex mu_;
  std::vector<UpstreamRequest> requests_;
  std::atomic<std::size_t> handshakes_{0};
};

/// Plain TCP echo.
class EchoServer {
 public:
  EchoServer();
  ~EchoServer();
  void start();
  void stop();
  Endpoint endpoint() const;
  std::uint64_t bytes_echoed() const { return bytes_.load(); }

 private:
  std::unique_ptr<detail::TcpService> service_;
  std::atomic<std::uint64_t> bytes_{0};
};

enum class Placement { None, UpstreamPath, OraclePath, Both };
std::string_view to_string(Placement p);
std::optional<Placement> parse_placement(std::string_view s);
/// None -> Forwarded; UpstreamPath -> BlockedMismatch; OraclePath, Both -> BlockedPinFailure.
EnforcementAction expected_action(Placement p);
std::vector<Placement> all_placements();

/// Active attacker for one logical endpoint. Victims routed to it get a
/// leaf forged by the attacker's own CA; it then opens its own session to
/// the real endpoint and relays, recording what the victim sends.
class RogueMitm {
 public:
  RogueMitm(CertAuthority forging_ca, Endpoint logical, std::shared_ptr<const Dialer> onward);
  ~RogueMitm();
  RogueMitm(const RogueMitm&) = delete;
  RogueMitm& operator=(const RogueMitm&) = delete;

  void start();
  void stop();
  Endpoint endpoint() const;
  const Endpoint& logical() const { return logical_; }
  const CertAuthority& ca() const { return ca_; }

  /// Plaintext received from victims since the last clear.
  Bytes captured() const;
  /// TLS sessions completed with victims.
  std::size_t sessions() const { return sessions_.load(); }
  void clear();

 private:
  void serve(Socket s);

  CertAuthority ca_;
  Endpoint logical_;
  std::shared_ptr<const Dialer> onward_;
  SslCtxPtr ctx_;
  std::unique_ptr<detail::TcpService> service_;
  mutable std::mutex mu_;
  Bytes captured_;
  std::atomic<std::size_t> sessions_{0};
};

struct LabOptions {
  PolicyMode mode = PolicyMode::Automatic;
  std::chrono::milliseconds decision_window{3000};
  std::chrono::milliseconds pending_timeout{5000};
  bool start_admin = false;
  std::string upstream_host = "shop.test";
  std::string oracle_host = "oracle.test";
  std::uint16_t oracle_port = 8443;
  std::string echo_host = "echo.test";
  std::uint16_t echo_port = 7;
};

/// Everything on loopback: a public CA with an intermediate, an origin
/// server, an echo server, the oracle, the proxy with its enforcer, and one
/// attacker per interceptable link.
///
/// Two networks exist. `device_net` is what the proxy host sees and is where
/// attackers are inserted; `backbone` is the oracle's clean view.
class Lab {
 public:
  explicit Lab(LabOptions options = {});
  ~Lab();
  Lab(const Lab&) = delete;
  Lab& operator=(const Lab&) = delete;

  void place_attacker(Placement placement);
  Placement placement() const { return placement_; }

  ClientContext client_context(bool via_proxy = true) const;
  /// Through the proxy.
  ClientResult request(const SyntheticClient& client, const ClientRequest& request = {});
  /// Straight to the origin over device_net, without the proxy.
  ClientResult request_direct(const SyntheticClient& client, const ClientRequest& request = {});
  /// The flow a request produced, once the proxy is idle.
  std::optional<FlowRecord> flow_for(const ClientResult& result) const;

  const LabOptions& options() const { return options_; }
  HttpsUrl upstream_url() const;
  Endpoint upstream_logical() const;
  Endpoint oracle_logical() const;
  Endpoint echo_logical() const;
  const Bytes& upstream_leaf_der() const { return upstream_leaf_der_; }
  const TrustStore& public_trust() const { return public_trust_; }
  const CertAuthority& public_root() const { return public_root_; }
  const CertAuthority& public_intermediate() const { return public_intermediate_; }
  const CertAuthority& proxy_ca() const { return ca_; }
  std::string intermediate_subject() const;
  std::string proxy_ca_subject() const;

  NetworkMap& device_net() { return *device_net_; }
  NetworkMap& backbone() { return *backbone_; }
  UpstreamServer& upstream() { return *upstream_; }
  EchoServer& echo() { return *echo_; }
  OracleServer& oracle() { return *oracle_; }
  RogueMitm& upstream_attacker() { return *upstream_attacker_; }
  RogueMitm& oracle_attacker() { return *oracle_attacker_; }
  ProxyServer& proxy() { return *proxy_; }
  Enforcer& enforcer() { return *enforcer_; }
  WhitelistStore& store() { return *store_; }
  VerdictLog& verdicts() { return *verdicts_; }
  EventBus& events() { return *events_; }
  PolicyState& policy() { return *policy_; }
  DecisionQueue& decisions() { return *decisions_; }
  TableResolver& resolver() { return *resolver_; }
  /// Null unless LabOptions::start_admin.
  AdminApi* admin() { return admin_.get(); }

 private:
  LabOptions options_;
  CertAuthority public_root_;
  CertAuthority public_intermediate_;
  CertAuthority ca_;
  CertAuthority attacker_ca_;
  TrustStore public_trust_;
  Bytes upstream_leaf_der_;
  std::shared_ptr<NetworkMap> device_net_;
  std::shared_ptr<NetworkMap> backbone_;
  std::unique_ptr<UpstreamServer> upstream_;
  std::unique_ptr<EchoServer> echo_;
  std::unique_ptr<OracleServer> oracle_;
  std::unique_ptr<RogueMitm> upstream_attacker_;
  std::unique_ptr<RogueMitm> oracle_attacker_;
  std::shared_ptr<WhitelistStore> store_;
  std::shared_ptr<VerdictLog> verdicts_;
  std::shared_ptr<EventBus> events_;
  std::shared_ptr<PolicyState> policy_;
  std::shared_ptr<DecisionQueue> decisions_;
  std::shared_ptr<TableResolver> resolver_;
  std::shared_ptr<Enforcer> enforcer_;
  std::unique_ptr<ProxyServer> proxy_;
  std::unique_ptr<AdminApi> admin_;
  Placement placement_ = Placement::None;
};

struct DetectionRow {
  SyntheticClient client;
  VerdictValue expected = VerdictValue::Untested;
  std::vector<VerdictValue> verdicts;
  std::vector<std::optional<Evidence>> evidence;
  /// Extra attempts spent on Untested results.
  std::size_t retries = 0;
  bool as_expected() const;
};

struct DetectionReport {
  std::vector<DetectionRow> rows;
  std::chrono::milliseconds elapsed{0};
  bool passed() const;
  std::string to_json() const;
  std::string to_table() const;
};

/// Each client makes `runs` requests; its whitelist entry is removed before
/// every run so each one is a fresh pentest. Untested is retried up to 3 times.
DetectionReport run_detection_matrix(Lab& lab, const std::vector<SyntheticClient>& clients, std::size_t runs = 1);

struct AttackRow {
  Placement placement = Placement::None;
  EnforcementAction expected = EnforcementAction::Forwarded;
  std::vector<std::optional<EnforcementAction>> actions;
  /// Bytes of victim plaintext the attackers captured over all trials.
  std::size_t leaked_bytes = 0;
  bool as_expected() const;
};

struct AttackReport {
  std::vector<AttackRow> rows;
  std::chrono::milliseconds elapsed{0};
  bool passed() const;
  std::string to_json() const;
  std::string to_table() const;
};

/// A Naive client behind the enforcer, with the chain cache cleared before
/// every trial.
AttackReport run_attack_matrix(Lab& lab, const std::vector<Placement>& placements, std::size_t trials = 10);

struct DurationStats {
  std::size_t n = 0;
  double median_ms = 0;
  double p95_ms = 0;
  double mean_ms = 0;
  double min_ms = 0;
  double max_ms = 0;
  static DurationStats of(std::vector<double> samples_ms);
};

struct BenchOptions {
  std::size_t trials = 30;
  std::size_t requests_per_trial = 3;
  /// Disable the chain cache while measuring the protected run.
  bool cold = true;
};

struct BenchReport {
  std::string scenario;
  DurationStats baseline;
  DurationStats protected_run;
  double overhead_ratio = 0;
  /// Direct plus oracle fetches for a host seen for the first time.
  std::uint64_t fetches_new_host = 0;
  /// Same, for a repeat within the cache TTL.
  std::uint64_t fetches_cached_host = 0;
  bool valid = true;
  std::string invalid_reason;
  std::size_t failed_requests = 0;
  std::string to_json() const;
  std::string to_table() const;
};

/// Baseline: a whitelisted Strict client relayed untouched. Protected: a
/// Naive client pentested and enforced on every request. Each trial is a
/// login-like exchange of sequential HTTPS requests.
BenchReport run_overhead_bench(Lab& lab, const BenchOptions& options = {});

/// Starts `n` Naive requests at once. Returns how many completed with 200.
std::size_t run_concurrent(Lab& lab, std::size_t n);

}  // namespace certwarden::sim
