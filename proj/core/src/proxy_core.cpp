#include "certwarden/proxy_core.hpp"

#include <sys/socket.h>

#include <algorithm>
#include <cctype>

namespace certwarden {

std::string_view to_string(FlowPhase p) {
  switch (p) {
    case FlowPhase::Connecting:
      return "Connecting";
    case FlowPhase::Pentesting:
      return "Pentesting";
    case FlowPhase::Enforcing:
      return "Enforcing";
    case FlowPhase::Forwarding:
      return "Forwarding";
    case FlowPhase::PendingDecision:
      return "PendingDecision";
    case FlowPhase::Closed:
      return "Closed";
  }
  return "?";
}

bool can_transition(FlowPhase from, FlowPhase to) {
  using P = FlowPhase;
  switch (from) {
    case P::Connecting:
      return to == P::Pentesting || to == P::Forwarding || to == P::Enforcing || to == P::Closed;
    case P::Pentesting:
      return to == P::Enforcing || to == P::PendingDecision || to == P::Closed;
    case P::PendingDecision:
      return to == P::Enforcing || to == P::Closed;
    case P::Enforcing:
      return to == P::Forwarding || to == P::Closed;
    case P::Forwarding:
      return to == P::Closed;
    case P::Closed:
      return false;
  }
  return false;
}

void FlowRecord::advance(FlowPhase to) {
  if (!can_transition(phase, to)) {
    throw FlowTransitionError("flow " + std::to_string(flow_id) + ": " + std::string(to_string(phase)) + " -> " +
                              std::string(to_string(to)));
  }
  phase = to;
  history.push_back(to);
}

std::string_view to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::Automatic:
      return "automatic";
    case PolicyMode::Selective:
      return "selective";
    case PolicyMode::Manual:
      return "manual";
  }
  return "?";
}

std::optional<PolicyMode> parse_policy_mode(std::string_view s) {
  std::string lower(s);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (auto m : {PolicyMode::Automatic, PolicyMode::Selective, PolicyMode::Manual}) {
    if (to_string(m) == lower) return m;
  }
  return std::nullopt;
}

Policy PolicyState::get() const {
  std::lock_guard lock(mu_);
  return policy_;
}

void PolicyState::set(Policy p) {
  std::lock_guard lock(mu_);
  policy_ = std::move(p);
}

void PolicyState::set_mode(PolicyMode m) {
  std::lock_guard lock(mu_);
  policy_.mode = m;
}

std::string_view to_string(Route r) {
  switch (r) {
    case Route::Forwarding:
      return "Forwarding";
    case Route::Pentesting:
      return "Pentesting";
    case Route::Enforcing:
      return "Enforcing";
  }
  return "?";
}

Route route_flow(const ClientDescriptor& client, bool identity_known, const std::optional<WhitelistEntry>& entry,
                 const Policy& policy) {
  if (policy.mode == PolicyMode::Manual && policy.manual_selection.count(client.name) == 0) {
    return Route::Forwarding;
  }
  if (identity_known && entry) return entry->enforce_anyway ? Route::Enforcing : Route::Forwarding;
  return Route::Pentesting;
}

std::string_view to_string(Decision d) { return d == Decision::Allow ? "allow" : "block"; }

std::optional<Decision> parse_decision(std::string_view s) {
  std::string lower(s);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "allow") return Decision::Allow;
  if (lower == "block") return Decision::Block;
  return std::nullopt;
}

std::string_view to_string(SubmitResult r) {
  switch (r) {
    case SubmitResult::Accepted:
      return "accepted";
    case SubmitResult::Expired:
      return "expired";
    case SubmitResult::UnknownFlow:
      return "unknown_flow";
    case SubmitResult::Conflict:
      return "conflict";
  }
  return "?";
}

DecisionQueue::DecisionQueue(Clock clock) : clock_(std::move(clock)) {}

Decision DecisionQueue::await(std::uint64_t flow_id, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  open_[flow_id] = Slot{clock_() + timeout, std::nullopt};
  if (auto hook = on_pending_) {
    lock.unlock();
    hook(flow_id);
    lock.lock();
  }
  for (;;) {
    auto& slot = open_[flow_id];
    if (slot.decision) {
      const auto d = *slot.decision;
      open_.erase(flow_id);
      decided_[flow_id] = d;
      return d;
    }
    if (clock_() >= slot.deadline) {
      open_.erase(flow_id);
      expired_.insert(flow_id);
      return Decision::Block;
    }
    // Short slices so an injected clock is honored promptly.
    cv_.wait_for(lock, std::chrono::milliseconds(10));
  }
}

SubmitResult DecisionQueue::submit(std::uint64_t flow_id, Decision decision) {
  std::lock_guard lock(mu_);
  if (expired_.count(flow_id)) return SubmitResult::Expired;
  if (const auto it = decided_.find(flow_id); it != decided_.end()) {
    return it->second == decision ? SubmitResult::Accepted : SubmitResult::Conflict;
  }
  const auto it = open_.find(flow_id);
  if (it == open_.end()) return SubmitResult::UnknownFlow;
  if (it->second.decision) {
    return *it->second.decision == decision ? SubmitResult::Accepted : SubmitResult::Conflict;
  }
  if (clock_() >= it->second.deadline) return SubmitResult::Expired;
  it->second.decision = decision;
  cv_.notify_all();
  return SubmitResult::Accepted;
}

std::vector<DecisionQueue::Pending> DecisionQueue::pending() const {
  std::lock_guard lock(mu_);
  std::vector<Pending> out;
  for (const auto& [id, slot] : open_) {
    if (!slot.decision) out.push_back({id, slot.deadline});
  }
  return out;
}

void DecisionQueue::block_all() {
  std::lock_guard lock(mu_);
  for (auto& [id, slot] : open_) {
    if (!slot.decision) slot.decision = Decision::Block;
  }
  cv_.notify_all();
}

void DecisionQueue::on_pending(std::function<void(std::uint64_t)> fn) {
  std::lock_guard lock(mu_);
  on_pending_ = std::move(fn);
}

std::optional<Endpoint> parse_connect_target(std::string_view line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
  const auto sp1 = line.find(' ');
  if (sp1 == std::string_view::npos || line.substr(0, sp1) != "CONNECT") return std::nullopt;
  const auto sp2 = line.find(' ', sp1 + 1);
  if (sp2 == std::string_view::npos || line.find(' ', sp2 + 1) != std::string_view::npos) return std::nullopt;
  if (line.substr(sp2 + 1).rfind("HTTP/1.", 0) != 0) return std::nullopt;
  auto ep = parse_endpoint(line.substr(sp1 + 1, sp2 - sp1 - 1));
  if (!ep || !is_valid_host(ep->host)) return std::nullopt;
  return ep;
}

namespace {

/// "GET http://host[:port]/path HTTP/1.1" -> host:port.
std::optional<Endpoint> parse_absolute_http_target(std::string_view line) {
  const auto sp1 = line.find(' ');
  if (sp1 == std::string_view::npos) return std::nullopt;
  auto uri = line.substr(sp1 + 1);
  uri = uri.substr(0, static_cast<std::size_t>(std::find(uri.begin(), uri.end(), ' ') - uri.begin()));
  constexpr std::string_view scheme = "http://";
  if (uri.rfind(scheme, 0) != 0) return std::nullopt;
  auto authority = uri.substr(scheme.size());
  authority = authority.substr(0, authority.find_first_of("/?#"));
  if (authority.empty()) return std::nullopt;
  if (authority.find(':') == std::string_view::npos || authority.front() == '[') {
    if (authority.front() == '[' && authority.find("]:") != std::string_view::npos) return parse_endpoint(authority);
    if (authority.front() == '[') {
      const auto close = authority.find(']');
      if (close == std::string_view::npos) return std::nullopt;
      return Endpoint{std::string(authority.substr(1, close - 1)), 80};
    }
    if (!is_valid_host(authority)) return std::nullopt;
    return Endpoint{std::string(authority), 80};
  }
  auto ep = parse_endpoint(authority);
  if (!ep || !is_valid_host(ep->host)) return std::nullopt;
  return ep;
}

std::int64_t steady_to_unix_ms(SteadyClock::time_point t) {
  const auto delta = std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - t);
  return unix_millis() - delta.count();
}

constexpr std::string_view kEstablished = "HTTP/1.1 200 Connection Established\r\n\r\n";
constexpr std::string_view kBadRequest =
    "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n";
constexpr std::string_view kForbidden = "HTTP/1.1 403 Forbidden\r\nContent-Length: 0\r\nConnection: close\r\n\r\n";

}  // namespace

class ProxyServer::FlowContext {
 public:
  FlowRecord record;
  Endpoint target;
  HttpsUrl url;
};

ProxyServer::ProxyServer(ProxyOptions options, ProxyDeps deps)
    : options_(std::move(options)), deps_(std::move(deps)) {
  if (!deps_.dialer) deps_.dialer = std::make_shared<SystemDialer>();
  if (!deps_.resolver) deps_.resolver = std::make_shared<UnknownResolver>();
  if (!deps_.policy) deps_.policy = std::make_shared<PolicyState>();
  if (!deps_.decisions) deps_.decisions = std::make_shared<DecisionQueue>();
  if (!deps_.pentester) throw std::invalid_argument("proxy needs a pentester");
  if (!deps_.enforcer) throw std::invalid_argument("proxy needs an enforcer");
}

ProxyServer::~ProxyServer() { stop(); }

void ProxyServer::start() {
  listener_ = Listener::bind(options_.bind_host, options_.port);
  stopping_ = false;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void ProxyServer::stop() {
  if (!acceptor_.joinable()) return;
  stopping_ = true;
  acceptor_.join();
  listener_.close();
  {
    std::lock_guard lock(flows_mu_);
    for (int fd : live_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  deps_.decisions->block_all();
  // Flow threads reference this object; every wait inside them is bounded.
  std::unique_lock lock(flows_mu_);
  idle_cv_.wait(lock, [&] { return active_ == 0; });
}

void ProxyServer::accept_loop() {
  while (!stopping_) {
    auto client = listener_.accept(deadline_in(std::chrono::milliseconds(100)));
    if (!client.valid()) continue;
    {
      std::lock_guard lock(flows_mu_);
      ++active_;
      live_fds_.insert(client.fd());
    }
    std::thread([this, c = std::move(client)]() mutable {
      const int fd = c.fd();
      try {
        handle(std::move(c));
      } catch (const std::exception&) {
        // A flow failing must never take the proxy down.
      }
      std::lock_guard lock(flows_mu_);
      live_fds_.erase(fd);
      --active_;
      idle_cv_.notify_all();
    }).detach();
  }
}

std::vector<FlowRecord> ProxyServer::flows() const {
  std::lock_guard lock(flows_mu_);
  std::vector<FlowRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  return out;
}

std::optional<FlowRecord> ProxyServer::flow(std::uint64_t id) const {
  std::lock_guard lock(flows_mu_);
  const auto it = records_.find(id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::size_t ProxyServer::active_flows() const {
  std::lock_guard lock(flows_mu_);
  return active_;
}

bool ProxyServer::wait_idle(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(flows_mu_);
  return idle_cv_.wait_for(lock, timeout, [&] { return active_ == 0; });
}

void ProxyServer::update(const FlowRecord& record) {
  std::lock_guard lock(flows_mu_);
  records_[record.flow_id] = record;
  if (record.phase == FlowPhase::Closed) {
    closed_order_.push_back(record.flow_id);
    while (closed_order_.size() > options_.history) {
      records_.erase(closed_order_.front());
      closed_order_.pop_front();
    }
  }
}

void ProxyServer::publish(FlowContext& ctx, std::string event, Fields fields) {
  if (deps_.events) deps_.events->publish(ctx.record.flow_id, std::move(event), std::move(fields));
}

void ProxyServer::set_phase(FlowContext& ctx, FlowPhase to) {
  ctx.record.advance(to);
  update(ctx.record);
  publish(ctx, "phase", {{"phase", std::string(to_string(to))}});
}

void ProxyServer::close_flow(FlowContext& ctx, const std::string& note) {
  if (!note.empty()) ctx.record.note = note;
  ctx.record.timings.end = unix_millis();
  set_phase(ctx, FlowPhase::Closed);
  Fields f{{"bytes_up", static_cast<std::int64_t>(ctx.record.bytes_up)},
           {"bytes_down", static_cast<std::int64_t>(ctx.record.bytes_down)}};
  if (!ctx.record.note.empty()) f.emplace_back("note", ctx.record.note);
  publish(ctx, "flow_closed", std::move(f));
}

void ProxyServer::handle(Socket client_socket) {
  PlainStream client(std::move(client_socket));
  std::optional<std::string> head;
  try {
    head = client.read_until("\r\n\r\n", 16 * 1024, deadline_in(options_.header_timeout));
  } catch (const NetError&) {
    return;
  }
  if (!head) return;
  const auto request_line = std::string_view(*head).substr(0, head->find("\r\n"));

  FlowContext ctx;
  bool plain_http = false;
  if (auto target = parse_connect_target(request_line)) {
    ctx.target = std::move(*target);
  } else if (auto http = parse_absolute_http_target(request_line);
             http && request_line.rfind("CONNECT ", 0) != 0) {
    ctx.target = std::move(*http);
    plain_http = true;
  } else {
    // Malformed: answered and dropped, no flow record kept.
    try {
      client.write_all(kBadRequest, deadline_in(options_.header_timeout));
    } catch (const NetError&) {
    }
    if (deps_.events) deps_.events->publish(0, "connect_rejected", {{"request", std::string(request_line.substr(0, 200))}});
    return;
  }

  auto& r = ctx.record;
  r.flow_id = next_flow_id_.fetch_add(1);
  r.client_port = client.socket().peer_port();
  r.target_host = ctx.target.host;
  r.target_port = ctx.target.port;
  r.timings.start = unix_millis();
  ctx.url = HttpsUrl{ctx.target.host, ctx.target.port, "/"};

  const auto owner = deps_.resolver->resolve_port(r.client_port, listener_.port());
  if (owner && !owner->process_name.empty()) {
    r.client = {owner->process_name, owner->version, ctx.url.to_string()};
    r.identity_known = true;
  } else {
    // Unattributed connections never share an identity, so they are
    // always tested and never whitelisted.
    r.client = {"port:" + std::to_string(r.client_port), "", ctx.url.to_string()};
  }
  update(r);
  publish(ctx, "flow_opened",
          {{"client", r.client.name},
           {"version", r.client.version},
           {"identity_known", r.identity_known},
           {"client_port", static_cast<std::int64_t>(r.client_port)},
           {"target", ctx.target.to_string()},
           {"plain_http", plain_http}});

  if (plain_http) {
    // Not TLS: nothing to test or compare, relayed as is.
    set_phase(ctx, FlowPhase::Forwarding);
    run_passthrough(ctx, client, *head);
    return;
  }

  std::optional<WhitelistEntry> entry;
  if (deps_.store && r.identity_known) {
    entry = deps_.store->lookup(r.client.name, r.client.version);
  } else if (!deps_.store) {
    publish(ctx, "warning", {{"message", std::string("whitelist store unavailable, testing instead")}});
  }
  const auto policy = deps_.policy->get();
  const auto route = route_flow(r.client, r.identity_known, entry, policy);
  publish(ctx, "routed", {{"route", std::string(to_string(route))}, {"whitelisted", entry.has_value()}});

  switch (route) {
    case Route::Forwarding:
      set_phase(ctx, FlowPhase::Forwarding);
      run_passthrough(ctx, client, {});
      return;
    case Route::Enforcing: {
      // Whitelisted clients validate for themselves; their TLS is left
      // intact and only the chain comparison runs in front of it.
      set_phase(ctx, FlowPhase::Enforcing);
      auto result = deps_.enforcer->check(ctx.url);
      r.enforcement = result;
      Fields f{{"action", std::string(to_string(result.action))}, {"from_cache", result.from_cache},
               {"oracle_pin_ok", result.oracle_pin_ok}, {"passthrough", true}};
      if (result.comparison && result.comparison->reason) {
        f.emplace_back("reason", std::string(to_string(*result.comparison->reason)));
      }
      if (result.comparison && result.comparison->first_divergence) {
        f.emplace_back("divergence_index", static_cast<std::int64_t>(*result.comparison->first_divergence));
      }
      if (!result.diagnostic.empty()) f.emplace_back("diagnostic", result.diagnostic);
      publish(ctx, "enforcement", std::move(f));
      if (!result.forwarded()) {
        try {
          client.write_all(kForbidden, deadline_in(options_.header_timeout));
        } catch (const NetError&) {
        }
        close_flow(ctx, "blocked: " + std::string(to_string(result.action)));
        return;
      }
      set_phase(ctx, FlowPhase::Forwarding);
      run_passthrough(ctx, client, {});
      return;
    }
    case Route::Pentesting:
      run_pentest(ctx, client);
      return;
  }
}

void ProxyServer::run_passthrough(FlowContext& ctx, PlainStream& client, std::string_view pending_head) {
  Socket upstream_socket;
  try {
    upstream_socket = deps_.dialer->connect(ctx.target, deadline_in(options_.connect_timeout));
  } catch (const NetError& e) {
    client.socket().reset();
    close_flow(ctx, std::string("upstream unreachable: ") + e.what());
    return;
  }
  PlainStream upstream(std::move(upstream_socket));
  {
    std::lock_guard lock(flows_mu_);
    live_fds_.insert(upstream.fd());
  }
  try {
    if (pending_head.empty()) {
      client.write_all(kEstablished, deadline_in(options_.header_timeout));
    } else {
      upstream.write_all(pending_head, deadline_in(options_.header_timeout));
      ctx.record.bytes_up += pending_head.size();
    }
    const auto stats = relay(client, upstream, options_.idle_timeout);
    ctx.record.bytes_up += stats.a_to_b;
    ctx.record.bytes_down += stats.b_to_a;
    if (stats.first_byte) ctx.record.timings.first_byte = steady_to_unix_ms(*stats.first_byte);
  } catch (const NetError& e) {
    ctx.record.note = e.what();
  }
  {
    std::lock_guard lock(flows_mu_);
    live_fds_.erase(upstream.fd());
  }
  close_flow(ctx);
}

void ProxyServer::run_pentest(FlowContext& ctx, PlainStream& client) {
  auto& r = ctx.record;
  try {
    client.write_all(kEstablished, deadline_in(options_.header_timeout));
  } catch (const NetError& e) {
    set_phase(ctx, FlowPhase::Pentesting);
    close_flow(ctx, e.what());
    return;
  }
  set_phase(ctx, FlowPhase::Pentesting);
  auto outcome = deps_.pentester->pentest(std::move(client.socket()), ctx.target.host);
  const auto& v = outcome.verdict;
  r.verdict_at_time = v;
  if (outcome.session) r.timings.handshake_done = unix_millis();
  r.bytes_up += outcome.first_bytes.size();
  update(r);
  Fields vf{{"verdict", std::string(to_string(v.value))}};
  if (v.evidence) vf.emplace_back("evidence", std::string(to_string(*v.evidence)));
  if (!v.detail.empty()) vf.emplace_back("detail", v.detail);
  publish(ctx, "verdict", std::move(vf));

  if (v.value != VerdictValue::Untested && r.identity_known && deps_.recorder) {
    try {
      deps_.recorder->record(r.client, v);
    } catch (const std::exception& e) {
      publish(ctx, "warning", {{"message", std::string("verdict not recorded: ") + e.what()}});
    }
  }
  if (v.value != VerdictValue::Vulnerable) {
    close_flow(ctx, std::string(to_string(v.value)));
    return;
  }

  const auto policy = deps_.policy->get();
  if (policy.mode != PolicyMode::Automatic) {
    set_phase(ctx, FlowPhase::PendingDecision);
    publish(ctx, "decision_pending", {{"timeout_ms", static_cast<std::int64_t>(policy.pending_timeout.count())},
                                      {"deadline", unix_millis() + policy.pending_timeout.count()}});
    const int fd = outcome.session->fd();
    {
      std::lock_guard lock(flows_mu_);
      live_fds_.insert(fd);
    }
    const auto d = deps_.decisions->await(r.flow_id, policy.pending_timeout);
    {
      std::lock_guard lock(flows_mu_);
      live_fds_.erase(fd);
    }
    publish(ctx, "decision", {{"action", std::string(to_string(d))}});
    if (d == Decision::Block) {
      outcome.session->socket().reset();
      close_flow(ctx, "blocked by decision");
      return;
    }
  }
  set_phase(ctx, FlowPhase::Enforcing);
  run_enforced(ctx, *outcome.session, outcome.first_bytes);
}

void ProxyServer::run_enforced(FlowContext& ctx, TlsStream& client, const Bytes& first_bytes) {
  auto& r = ctx.record;
  auto session = deps_.enforcer->enforce(ctx.url);
  const auto& res = session.result;
  r.enforcement = res;
  update(r);
  Fields f{{"action", std::string(to_string(res.action))},
           {"from_cache", res.from_cache},
           {"oracle_pin_ok", res.oracle_pin_ok},
           {"passthrough", false}};
  if (res.comparison && res.comparison->reason) {
    f.emplace_back("reason", std::string(to_string(*res.comparison->reason)));
  }
  if (res.comparison && res.comparison->first_divergence) {
    f.emplace_back("divergence_index", static_cast<std::int64_t>(*res.comparison->first_divergence));
  }
  if (!res.diagnostic.empty()) f.emplace_back("diagnostic", res.diagnostic);
  publish(ctx, "enforcement", std::move(f));

  if (!res.forwarded()) {
    client.socket().reset();
    close_flow(ctx, "blocked: " + std::string(to_string(res.action)));
    return;
  }
  set_phase(ctx, FlowPhase::Forwarding);
  auto& upstream = *session.upstream;
  const int ufd = upstream.fd();
  const int cfd = client.fd();
  {
    std::lock_guard lock(flows_mu_);
    live_fds_.insert(ufd);
    live_fds_.insert(cfd);
  }
  try {
    upstream.write_all(first_bytes, deadline_in(options_.idle_timeout));
    const auto stats = relay(client, upstream, options_.idle_timeout);
    r.bytes_up += stats.a_to_b;
    r.bytes_down += stats.b_to_a;
    if (stats.first_byte) r.timings.first_byte = steady_to_unix_ms(*stats.first_byte);
  } catch (const NetError& e) {
    r.note = e.what();
  }
  {
    std::lock_guard lock(flows_mu_);
    live_fds_.erase(ufd);
    live_fds_.erase(cfd);
  }
  close_flow(ctx);
}

}  // namespace certwarden
