#include "certwarden/admin_api.hpp"

#include <atomic>
#include <charconv>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace certwarden {

namespace {

using nlohmann::json;

json entry_json(const WhitelistEntry& e) {
  return {{"name", e.descriptor.name},
          {"version", e.descriptor.version},
          {"first_url", e.descriptor.first_url},
          {"inserted_at", e.inserted_at},
          {"enforce_anyway", e.enforce_anyway}};
}

json flow_json(const FlowRecord& r) {
  json j = {{"flow_id", r.flow_id},
            {"client", r.client.name},
            {"version", r.client.version},
            {"identity_known", r.identity_known},
            {"client_port", r.client_port},
            {"target", Endpoint{r.target_host, r.target_port}.to_string()},
            {"phase", std::string(to_string(r.phase))},
            {"bytes_up", r.bytes_up},
            {"bytes_down", r.bytes_down}};
  if (r.verdict_at_time) {
    j["verdict"] = std::string(to_string(r.verdict_at_time->value));
    if (r.verdict_at_time->evidence) j["evidence"] = std::string(to_string(*r.verdict_at_time->evidence));
  }
  if (r.enforcement) j["enforcement"] = std::string(to_string(r.enforcement->action));
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

}  // namespace

std::string flow_to_json(const FlowRecord& record) { return flow_json(record).dump(); }

std::string whitelist_entry_to_json(const WhitelistEntry& entry) { return entry_json(entry).dump(); }

struct AdminApi::Impl {
  AdminDeps deps;
  std::string host;
  std::uint16_t requested_port;
  std::uint16_t port = 0;
  httplib::Server server;
  std::thread thread;
  std::shared_ptr<std::atomic<bool>> stopping = std::make_shared<std::atomic<bool>>(false);

  void events(const httplib::Request& req, httplib::Response& res) {
    std::uint64_t since = 0;
    if (req.has_header("Last-Event-ID")) since = parse_u64(req.get_header_value("Last-Event-ID"));
    if (req.has_param("since")) since = parse_u64(req.get_param_value("since"));
    if (req.get_param_value("format") == "json") {
      std::string arr = "[";
      for (const auto& e : deps.events->since(since)) arr += (arr.size() > 1 ? "," : "") + e.to_json();
      res.set_content(arr + "]", "application/json");
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    auto bus = deps.events;
    auto stop = stopping;
    auto cursor = std::make_shared<std::uint64_t>(since);
    res.set_chunked_content_provider("text/event-stream", [bus, stop, cursor](std::size_t, httplib::DataSink& sink) {
      if (*stop) {
        sink.done();
        return true;
      }
      const auto batch = bus->since(*cursor, 256);
      if (batch.empty()) {
        if (!bus->wait_after(*cursor, std::chrono::seconds(1))) {
          static constexpr char ping[] = ": ping\n\n";
          return sink.write(ping, sizeof(ping) - 1);
        }
        return true;
      }
      for (const auto& e : batch) {
        const std::string frame = "id: " + std::to_string(e.id) + "\nevent: flow\ndata: " + e.to_json() + "\n\n";
        if (!sink.write(frame.data(), frame.size())) return false;
        *cursor = e.id;
      }
      return true;
    });
  }

  void decision(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return reply(res, 400, {{"error", "invalid_json"}});
    }
    if (!body.contains("flow_id") || !body["flow_id"].is_number_unsigned() || !body.contains("action") ||
        !body["action"].is_string()) {
      return reply(res, 400, {{"error", "flow_id and action required"}});
    }
    const auto action = parse_decision(body["action"].get<std::string>());
    if (!action) return reply(res, 400, {{"error", "action must be allow or block"}});
    const auto flow_id = body["flow_id"].get<std::uint64_t>();
    const auto r = deps.decisions->submit(flow_id, *action);
    int status = 200;
    if (r == SubmitResult::Expired || r == SubmitResult::Conflict) status = 409;
    if (r == SubmitResult::UnknownFlow) status = 404;
    if (deps.events && r == SubmitResult::Accepted) {
      deps.events->publish(flow_id, "operator_decision", {{"action", std::string(to_string(*action))}});
    }
    reply(res, status, {{"flow_id", flow_id}, {"result", std::string(to_string(r))}});
  }

  void whitelist_get(httplib::Response& res) {
    auto arr = json::array();
    if (deps.store) {
      for (const auto& e : deps.store->list()) arr.push_back(entry_json(e));
    }
    reply(res, 200, arr);
  }

  void whitelist_post(const httplib::Request& req, httplib::Response& res) {
    if (!deps.store) return reply(res, 503, {{"error", "store unavailable"}});
    json body;
    try {
      body = json::parse(req.body);
      const auto op = body.at("op").get<std::string>();
      const auto name = body.at("name").get<std::string>();
      const auto version = body.value("version", std::string());
      bool found = false;
      if (op == "remove") {
        found = deps.store->remove(name, version);
      } else if (op == "enforce_anyway") {
        found = deps.store->set_enforce_anyway(name, version, body.at("value").get<bool>());
      } else {
        return reply(res, 400, {{"error", "unknown op"}});
      }
      if (!found) return reply(res, 404, {{"error", "no such entry"}});
      if (deps.events) deps.events->publish(0, "whitelist_changed", {{"op", op}, {"name", name}, {"version", version}});
      whitelist_get(res);
    } catch (const json::exception& e) {
      reply(res, 400, {{"error", e.what()}});
    } catch (const StoreWriteError& e) {
      reply(res, 500, {{"error", e.what()}});
    }
  }

  json mode_json() const {
    const auto p = deps.policy->get();
    return {{"mode", std::string(to_string(p.mode))},
            {"manual_selection", p.manual_selection},
            {"pending_timeout_ms", p.pending_timeout.count()}};
  }

  void mode_post(const httplib::Request& req, httplib::Response& res) {
    try {
      const auto body = json::parse(req.body);
      auto p = deps.policy->get();
      if (body.contains("mode")) {
        const auto m = parse_policy_mode(body["mode"].get<std::string>());
        if (!m) return reply(res, 400, {{"error", "unknown mode"}});
        p.mode = *m;
      }
      if (body.contains("manual_selection")) {
        p.manual_selection = body["manual_selection"].get<std::set<std::string>>();
      }
      if (body.contains("pending_timeout_ms")) {
        const auto ms = body["pending_timeout_ms"].get<std::int64_t>();
        if (ms <= 0) return reply(res, 400, {{"error", "pending_timeout_ms must be positive"}});
        p.pending_timeout = std::chrono::milliseconds(ms);
      }
      deps.policy->set(p);
      if (deps.events) deps.events->publish(0, "mode_changed", {{"mode", std::string(to_string(p.mode))}});
      reply(res, 200, mode_json());
    } catch (const json::exception& e) {
      reply(res, 400, {{"error", e.what()}});
    }
  }
};

AdminApi::AdminApi(AdminDeps deps, std::string bind_host, std::uint16_t port) : impl_(std::make_unique<Impl>()) {
  if (!deps.events) deps.events = std::make_shared<EventBus>();
  if (!deps.decisions) deps.decisions = std::make_shared<DecisionQueue>();
  if (!deps.policy) deps.policy = std::make_shared<PolicyState>();
  impl_->deps = std::move(deps);
  impl_->host = std::move(bind_host);
  impl_->requested_port = port;
}

AdminApi::~AdminApi() { stop(); }

void AdminApi::start() {
  auto& s = *impl_;
  s.server.Get("/events", [&s](const httplib::Request& q, httplib::Response& r) { s.events(q, r); });
  s.server.Post("/decision", [&s](const httplib::Request& q, httplib::Response& r) { s.decision(q, r); });
  s.server.Get("/whitelist", [&s](const httplib::Request&, httplib::Response& r) { s.whitelist_get(r); });
  s.server.Post("/whitelist", [&s](const httplib::Request& q, httplib::Response& r) { s.whitelist_post(q, r); });
  s.server.Get("/mode", [&s](const httplib::Request&, httplib::Response& r) { reply(r, 200, s.mode_json()); });
  s.server.Post("/mode", [&s](const httplib::Request& q, httplib::Response& r) { s.mode_post(q, r); });
  s.server.Get("/flows", [&s](const httplib::Request&, httplib::Response& r) {
    auto arr = json::array();
    if (s.deps.proxy) {
      for (const auto& f : s.deps.proxy->flows()) arr.push_back(flow_json(f));
    }
    reply(r, 200, arr);
  });
  if (s.requested_port == 0) {
    const int p = s.server.bind_to_any_port(s.host);
    if (p <= 0) throw std::runtime_error("admin: cannot bind " + s.host);
    s.port = static_cast<std::uint16_t>(p);
  } else {
    if (!s.server.bind_to_port(s.host, s.requested_port)) {
      throw std::runtime_error("admin: cannot bind " + s.host + ":" + std::to_string(s.requested_port));
    }
    s.port = s.requested_port;
  }
  s.thread = std::thread([&s] { s.server.listen_after_bind(); });
  s.server.wait_until_ready();
}

void AdminApi::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  *impl_->stopping = true;
  impl_->server.stop();
  impl_->thread.join();
}

std::uint16_t AdminApi::port() const { return impl_->port; }

}  // namespace certwarden
