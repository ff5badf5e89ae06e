#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "certwarden/events.hpp"
#include "certwarden/proxy_core.hpp"
#include "certwarden/whitelist_store.hpp"

namespace certwarden {

struct AdminDeps {
  std::shared_ptr<EventBus> events;
  std::shared_ptr<DecisionQueue> decisions;
  std::shared_ptr<WhitelistStore> store;
  std::shared_ptr<PolicyState> policy;
  /// Optional; enables GET /flows.
  const ProxyServer* proxy = nullptr;
};

/// Localhost control surface for the dashboard and the CLI.
///
///   GET  /events      server-sent events; resumes after Last-Event-ID or
///                     ?since=N. ?format=json returns the backlog as an array.
///   POST /decision    {"flow_id":N,"action":"allow"|"block"}
///   GET  /whitelist   entry array
///   POST /whitelist   {"op":"remove"|"enforce_anyway","name","version","value"}
///   GET  /mode, POST /mode {"mode","manual_selection","pending_timeout_ms"}
///   GET  /flows
class AdminApi {
 public:
  AdminApi(AdminDeps deps, std::string bind_host = "127.0.0.1", std::uint16_t port = 0);
  ~AdminApi();
  AdminApi(const AdminApi&) = delete;
  AdminApi& operator=(const AdminApi&) = delete;

  void start();
  void stop();
  std::uint16_t port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string flow_to_json(const FlowRecord& record);
std::string whitelist_entry_to_json(const WhitelistEntry& entry);

}  // namespace certwarden
