#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "certwarden/client_ident.hpp"
#include "certwarden/enforcer.hpp"
#include "certwarden/events.hpp"
#include "certwarden/net.hpp"
#include "certwarden/pentester.hpp"
#include "certwarden/whitelist_store.hpp"

namespace certwarden {

enum class FlowPhase { Connecting, Pentesting, Enforcing, Forwarding, PendingDecision, Closed };

std::string_view to_string(FlowPhase p);

/// Forward-only edges of the flow workflow.
bool can_transition(FlowPhase from, FlowPhase to);

enum class PolicyMode { Automatic, Selective, Manual };

std::string_view to_string(PolicyMode m);
std::optional<PolicyMode> parse_policy_mode(std::string_view s);

struct Policy {
  PolicyMode mode = PolicyMode::Automatic;
  /// Client names singled out for analysis in Manual mode.
  std::set<std::string> manual_selection;
  std::chrono::milliseconds pending_timeout{30000};
};

/// Shared, race-free policy handle.
class PolicyState {
 public:
  explicit PolicyState(Policy initial = {}) : policy_(std::move(initial)) {}
  Policy get() const;
  void set(Policy p);
  void set_mode(PolicyMode m);

 private:
  mutable std::mutex mu_;
  Policy policy_;
};

class FlowTransitionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct FlowTimings {
  std::optional<std::int64_t> start;  // unix ms
  std::optional<std::int64_t> handshake_done;
  std::optional<std::int64_t> first_byte;
  std::optional<std::int64_t> end;
};

/// One intercepted CONNECT tunnel.
struct FlowRecord {
  std::uint64_t flow_id = 0;
  ClientDescriptor client;
  bool identity_known = false;
  std::uint16_t client_port = 0;
  std::string target_host;
  std::uint16_t target_port = 0;
  FlowPhase phase = FlowPhase::Connecting;
  std::vector<FlowPhase> history{FlowPhase::Connecting};
  std::optional<Verdict> verdict_at_time;
  std::optional<EnforcementResult> enforcement;
  FlowTimings timings;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::string note;

  /// Throws FlowTransitionError on an edge the workflow does not allow.
  void advance(FlowPhase to);
};

enum class Route { Forwarding, Pentesting, Enforcing };

std::string_view to_string(Route r);

/// The whitelist decision for a newly identified flow. `entry` is the
/// whitelist lookup result, nullopt when absent or when the store is not
/// available.
Route route_flow(const ClientDescriptor& client, bool identity_known, const std::optional<WhitelistEntry>& entry,
                 const Policy& policy);

enum class Decision { Allow, Block };

std::string_view to_string(Decision d);
std::optional<Decision> parse_decision(std::string_view s);

enum class SubmitResult { Accepted, Expired, UnknownFlow, Conflict };

std::string_view to_string(SubmitResult r);

/// Operator decisions for flows in PendingDecision. Flows block in await();
/// operators answer through submit(). Expiry falls back to Block.
class DecisionQueue {
 public:
  using Clock = std::function<SteadyClock::time_point()>;
  explicit DecisionQueue(Clock clock = [] { return SteadyClock::now(); });

  struct Pending {
    std::uint64_t flow_id;
    SteadyClock::time_point deadline;
  };

  /// Registers the flow and waits for an answer until `timeout` has passed
  /// on the queue's clock.
  Decision await(std::uint64_t flow_id, std::chrono::milliseconds timeout);
  /// Same answer twice is accepted; a different second answer conflicts.
  SubmitResult submit(std::uint64_t flow_id, Decision decision);
  std::vector<Pending> pending() const;
  /// Hook invoked once a flow is registered (tests use it to answer).
  void on_pending(std::function<void(std::uint64_t)> fn);
  /// Answers every open request with Block (shutdown path).
  void block_all();

 private:
  struct Slot {
    SteadyClock::time_point deadline;
    std::optional<Decision> decision;
  };

  Clock clock_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint64_t, Slot> open_;
  std::map<std::uint64_t, Decision> decided_;
  std::set<std::uint64_t> expired_;
  std::function<void(std::uint64_t)> on_pending_;
};

struct ProxyOptions {
  std::string bind_host = "127.0.0.1";
  std::uint16_t port = 0;
  std::chrono::milliseconds connect_timeout{10000};
  std::chrono::milliseconds header_timeout{10000};
  std::chrono::milliseconds idle_timeout{30000};
  /// Flow records kept after close.
  std::size_t history = 4096;
};

struct ProxyDeps {
  std::shared_ptr<Pentester> pentester;
  std::shared_ptr<Enforcer> enforcer;
  /// May be null: flows are then never considered whitelisted.
  std::shared_ptr<WhitelistStore> store;
  std::shared_ptr<VerdictRecorder> recorder;
  std::shared_ptr<SocketResolver> resolver;
  std::shared_ptr<const Dialer> dialer;
  std::shared_ptr<EventBus> events;
  std::shared_ptr<PolicyState> policy;
  std::shared_ptr<DecisionQueue> decisions;
};

/// Parsed "CONNECT host:port HTTP/1.1" target. nullopt for anything else.
std::optional<Endpoint> parse_connect_target(std::string_view request_line);

/// HTTP CONNECT proxy running each tunnel through whitelist check,
/// pentest, decision and enforcement. One thread per flow.
class ProxyServer {
 public:
  ProxyServer(ProxyOptions options, ProxyDeps deps);
  ~ProxyServer();
  ProxyServer(const ProxyServer&) = delete;
  ProxyServer& operator=(const ProxyServer&) = delete;

  void start();
  /// Stops accepting, aborts live flows and waits for them.
  void stop();
  std::uint16_t port() const { return listener_.port(); }
  Endpoint endpoint() const { return listener_.endpoint(); }

  std::vector<FlowRecord> flows() const;
  std::optional<FlowRecord> flow(std::uint64_t id) const;
  std::size_t active_flows() const;
  /// Waits until no flow is running. False on timeout.
  bool wait_idle(std::chrono::milliseconds timeout) const;

  const ProxyDeps& deps() const { return deps_; }

 private:
  class FlowContext;
  void accept_loop();
  void handle(Socket client);
  void publish(FlowContext& ctx, std::string event, Fields fields = {});
  void set_phase(FlowContext& ctx, FlowPhase to);
  void update(const FlowRecord& record);

  void run_passthrough(FlowContext& ctx, PlainStream& client, std::string_view pending_head);
  void run_pentest(FlowContext& ctx, PlainStream& client);
  void run_enforced(FlowContext& ctx, TlsStream& client, const Bytes& first_bytes);
  void close_flow(FlowContext& ctx, const std::string& note = {});

  ProxyOptions options_;
  ProxyDeps deps_;
  Listener listener_;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> next_flow_id_{1};

  mutable std::mutex flows_mu_;
  mutable std::condition_variable idle_cv_;
  std::map<std::uint64_t, FlowRecord> records_;
  std::deque<std::uint64_t> closed_order_;
  std::set<int> live_fds_;
  std::size_t active_ = 0;
};

}  // namespace certwarden
