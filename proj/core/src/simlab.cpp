#include "certwarden/simlab.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include <sys/socket.h>
#include <unistd.h>

#include "json.hpp"

namespace certwarden::sim {

using namespace std::chrono_literals;
using nlohmann::json;

namespace detail {

/// Accept loop with one thread per connection. stop() unblocks live
/// connections by shutting their sockets down.
class TcpService {
 public:
  using Handler = std::function<void(Socket)>;

  explicit TcpService(Handler handler) : handler_(std::move(handler)) {}
  ~TcpService() { stop(); }

  void start() {
    listener_ = Listener::bind("127.0.0.1", 0);
    thread_ = std::thread([this] { loop(); });
  }

  void stop() {
    if (!thread_.joinable()) return;
    stopping_ = true;
    thread_.join();
    std::vector<Worker> workers;
    {
      std::lock_guard lock(mu_);
      for (int fd : live_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& w : workers) w.thread.join();
    listener_.close();
  }

  Endpoint endpoint() const { return listener_.endpoint(); }

 private:
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  void loop() {
    while (!stopping_) {
      Socket s = listener_.accept(deadline_in(50ms));
      reap();
      if (!s.valid()) continue;
      const int fd = s.fd();
      auto done = std::make_shared<std::atomic<bool>>(false);
      std::lock_guard lock(mu_);
      live_.insert(fd);
      workers_.push_back({std::thread([this, fd, done, s = std::move(s)]() mutable {
                            try {
                              handler_(std::move(s));
                            } catch (const std::exception&) {
                            }
                            {
                              std::lock_guard inner(mu_);
                              live_.erase(live_.find(fd));
                            }
                            *done = true;
                          }),
                          done});
    }
  }

  void reap() {
    std::vector<Worker> finished;
    {
      std::lock_guard lock(mu_);
      auto it = std::partition(workers_.begin(), workers_.end(), [](const Worker& w) { return !*w.done; });
      std::move(it, workers_.end(), std::back_inserter(finished));
      workers_.erase(it, workers_.end());
    }
    for (auto& w : finished) w.thread.join();
  }

  Handler handler_;
  Listener listener_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::multiset<int> live_;
  std::vector<Worker> workers_;
};

}  // namespace detail

namespace {

/// Stream decorator reporting every byte read.
class TapStream final : public Stream {
 public:
  TapStream(Stream& inner, std::function<void(ByteView)> tap) : inner_(inner), tap_(std::move(tap)) {}
  IoResult try_read(std::span<std::uint8_t> buf) override {
    const auto r = inner_.try_read(buf);
    if (r.status == IoStatus::Ok && r.n > 0) tap_(ByteView(buf.data(), r.n));
    return r;
  }
  IoResult try_write(ByteView data) override { return inner_.try_write(data); }
  bool has_buffered() const override { return inner_.has_buffered(); }
  void shutdown_write() override { inner_.shutdown_write(); }
  int fd() const override { return inner_.fd(); }

 private:
  Stream& inner_;
  std::function<void(ByteView)> tap_;
};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::size_t content_length(std::string_view head) {
  const auto l = lower(head);
  const auto pos = l.find("\r\ncontent-length:");
  if (pos == std::string::npos) return 0;
  std::size_t i = pos + 17;
  while (i < l.size() && l[i] == ' ') ++i;
  std::size_t n = 0;
  std::from_chars(l.data() + i, l.data() + l.size(), n);
  return n;
}

int pin_check(X509_STORE_CTX* store_ctx, void* arg) {
  const auto* pin = static_cast<const Bytes*>(arg);
  X509* leaf = X509_STORE_CTX_get0_cert(store_ctx);
  if (leaf != nullptr && x509_to_der(leaf) == *pin) return 1;
  X509_STORE_CTX_set_error(store_ctx, X509_V_ERR_CERT_REJECTED);
  return 0;
}

SslCtxPtr client_ctx(Behavior behavior, const ClientContext& ctx) {
  switch (behavior) {
    case Behavior::Naive:
      return make_client_ctx(nullptr);
    case Behavior::Strict:
      if (ctx.trust == nullptr) throw std::invalid_argument("strict client needs a trust store");
      return make_client_ctx(ctx.trust);
    case Behavior::Pinned: {
      auto c = make_client_ctx(nullptr);
      SSL_CTX_set_verify(c.get(), SSL_VERIFY_PEER, nullptr);
      SSL_CTX_set_cert_verify_callback(c.get(), pin_check, const_cast<Bytes*>(&ctx.pin));
      return c;
    }
  }
  return make_client_ctx(nullptr);
}

ClientRequest login_request() {
  return {"POST", "/login", "user=alice&password=correct-horse-battery-staple"};
}

double to_ms(std::chrono::nanoseconds d) { return std::chrono::duration<double, std::milli>(d).count(); }

CaOptions ca_options(std::string cn, std::string org) {
  CaOptions o;
  o.common_name = std::move(cn);
  o.organization = std::move(org);
  return o;
}

std::string fmt_ms(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << v;
  return out.str();
}

}  // namespace

std::string_view to_string(Behavior b) {
  switch (b) {
    case Behavior::Naive:
      return "naive";
    case Behavior::Strict:
      return "strict";
    case Behavior::Pinned:
      return "pinned";
  }
  return "?";
}

std::optional<Behavior> parse_behavior(std::string_view s) {
  const auto l = lower(s);
  if (l == "naive") return Behavior::Naive;
  if (l == "strict") return Behavior::Strict;
  if (l == "pinned") return Behavior::Pinned;
  return std::nullopt;
}

VerdictValue expected_verdict(Behavior b) {
  return b == Behavior::Naive ? VerdictValue::Vulnerable : VerdictValue::PenProof;
}

std::vector<SyntheticClient> default_clients() {
  return {{Behavior::Naive, "naive-shop", "1.0"},
          {Behavior::Strict, "strict-mail", "2.3"},
          {Behavior::Pinned, "pinned-bank", "5.1"}};
}

ClientResult run_client(const SyntheticClient& client, const ClientContext& ctx, const ClientRequest& request) {
  ClientResult out;
  const auto start = SteadyClock::now();
  const auto deadline = deadline_in(ctx.timeout);
  bool announced = false;
  try {
    Socket sock = ctx.proxy ? connect_tcp(*ctx.proxy, deadline) : ctx.dialer->connect(ctx.target, deadline);
    out.local_port = sock.local_port();
    if (ctx.resolver != nullptr) {
      ctx.resolver->add({out.local_port, static_cast<std::uint32_t>(::getuid()), 0, client.name, ::getpid(),
                         client.version});
      announced = true;
    }
    if (ctx.proxy) {
      PlainStream plain(std::move(sock));
      const auto target = ctx.target.to_string();
      plain.write_all("CONNECT " + target + " HTTP/1.1\r\nHost: " + target + "\r\n\r\n", deadline);
      const auto head = plain.read_until("\r\n\r\n", 8192, deadline);
      if (!head || head->rfind("HTTP/1.1 200", 0) != 0) {
        out.error = head ? "tunnel refused: " + head->substr(0, head->find('\r')) : "tunnel closed";
      } else {
        out.tunnel_open = true;
        sock = std::move(plain.socket());
      }
    } else {
      out.tunnel_open = true;
    }
    if (out.tunnel_open) {
      const auto ssl_ctx = client_ctx(client.behavior, ctx);
      auto tls = tls_client(std::move(sock), ssl_ctx.get(), ctx.target.host);
      const auto hs = tls->handshake(deadline);
      if (!hs.completed) {
        out.error = "handshake failed: " + hs.error;
      } else {
        out.handshake_ok = true;
        if (const auto leaf = tls->peer_leaf()) {
          out.leaf_issuer = name_to_string(X509_get_issuer_name(leaf.get()));
          out.leaf_subject = name_to_string(X509_get_subject_name(leaf.get()));
        }
        std::string req = request.method + " " + request.path + " HTTP/1.1\r\nHost: " + ctx.target.host +
                          "\r\nConnection: close\r\n";
        if (!request.body.empty() || request.method == "POST" || request.method == "PUT") {
          req += "Content-Length: " + std::to_string(request.body.size()) + "\r\n";
        }
        req += "\r\n" + request.body;
        tls->write_all(req, deadline);
        out.request_sent = true;
        const auto resp = tls->read_to_end(deadline);
        if (resp.rfind("HTTP/1.", 0) == 0 && resp.size() >= 12) {
          std::from_chars(resp.data() + 9, resp.data() + 12, out.status);
        }
        const auto split = resp.find("\r\n\r\n");
        if (split != std::string::npos) out.response_body = resp.substr(split + 4);
        if (out.status == 0) out.error = "no HTTP response";
      }
    }
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  if (announced) ctx.resolver->remove(out.local_port);
  out.elapsed = SteadyClock::now() - start;
  return out;
}

UpstreamServer::UpstreamServer(ServerIdentity identity, std::string body)
    : identity_(std::move(identity)), body_(std::move(body)), ctx_(make_server_ctx()) {
  service_ = std::make_unique<detail::TcpService>([this](Socket s) { serve(std::move(s)); });
}

UpstreamServer::~UpstreamServer() { stop(); }
void UpstreamServer::start() { service_->start(); }
void UpstreamServer::stop() { service_->stop(); }
Endpoint UpstreamServer::endpoint() const { return service_->endpoint(); }

std::vector<UpstreamRequest> UpstreamServer::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

void UpstreamServer::clear_requests() {
  std::lock_guard lock(mu_);
  requests_.clear();
}

void UpstreamServer::serve(Socket s) {
  auto tls = tls_server(std::move(s), ctx_.get(), identity_);
  if (!tls->handshake(deadline_in(5s)).completed) return;
  ++handshakes_;
  const auto deadline = deadline_in(5s);
  const auto head = tls->read_until("\r\n\r\n", 64 * 1024, deadline);
  if (!head) return;
  UpstreamRequest req;
  const auto line = head->substr(0, head->find("\r\n"));
  const auto sp1 = line.find(' ');
  const auto sp2 = line.find(' ', sp1 == std::string::npos ? 0 : sp1 + 1);
  if (sp1 == std::string::npos || sp2 == std::string::npos) return;
  req.method = line.substr(0, sp1);
  req.path = line.substr(sp1 + 1, sp2 - sp1 - 1);
  const auto need = std::min<std::size_t>(content_length(*head), 1 << 20);
  std::string body(need, '\0');
  std::size_t got = 0;
  while (got < need) {
    const auto n = tls->read_some({reinterpret_cast<std::uint8_t*>(body.data()) + got, need - got}, deadline);
    if (n == 0) break;
    got += n;
  }
  body.resize(got);
  req.body = std::move(body);
  {
    std::lock_guard lock(mu_);
    requests_.push_back(std::move(req));
  }
  const std::string resp = "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: " +
                           std::to_string(body_.size()) + "\r\nConnection: close\r\n\r\n" + body_;
  tls->write_all(resp, deadline);
  tls->shutdown_write();
}

EchoServer::EchoServer() {
  service_ = std::make_unique<detail::TcpService>([this](Socket s) {
    PlainStream stream(std::move(s));
    std::array<std::uint8_t, 16 * 1024> buf{};
    for (;;) {
      const auto n = stream.read_some(buf, deadline_in(5s));
      if (n == 0) break;
      stream.write_all(ByteView(buf.data(), n), deadline_in(5s));
      bytes_ += n;
    }
    stream.shutdown_write();
  });
}

EchoServer::~EchoServer() { stop(); }
void EchoServer::start() { service_->start(); }
void EchoServer::stop() { service_->stop(); }
Endpoint EchoServer::endpoint() const { return service_->endpoint(); }

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::None:
      return "none";
    case Placement::UpstreamPath:
      return "upstream_path";
    case Placement::OraclePath:
      return "oracle_path";
    case Placement::Both:
      return "both";
  }
  return "?";
}

std::optional<Placement> parse_placement(std::string_view s) {
  for (auto p : all_placements()) {
    if (lower(s) == to_string(p)) return p;
  }
  return std::nullopt;
}

EnforcementAction expected_action(Placement p) {
  switch (p) {
    case Placement::None:
      return EnforcementAction::Forwarded;
    case Placement::UpstreamPath:
      return EnforcementAction::BlockedMismatch;
    case Placement::OraclePath:
    case Placement::Both:
      return EnforcementAction::BlockedPinFailure;
  }
  return EnforcementAction::BlockedMismatch;
}

std::vector<Placement> all_placements() {
  return {Placement::None, Placement::UpstreamPath, Placement::OraclePath, Placement::Both};
}

RogueMitm::RogueMitm(CertAuthority forging_ca, Endpoint logical, std::shared_ptr<const Dialer> onward)
    : ca_(std::move(forging_ca)), logical_(std::move(logical)), onward_(std::move(onward)), ctx_(make_server_ctx()) {
  service_ = std::make_unique<detail::TcpService>([this](Socket s) { serve(std::move(s)); });
}

RogueMitm::~RogueMitm() { stop(); }
void RogueMitm::start() { service_->start(); }
void RogueMitm::stop() { service_->stop(); }
Endpoint RogueMitm::endpoint() const { return service_->endpoint(); }

Bytes RogueMitm::captured() const {
  std::lock_guard lock(mu_);
  return captured_;
}

void RogueMitm::clear() {
  std::lock_guard lock(mu_);
  captured_.clear();
  sessions_ = 0;
}

void RogueMitm::serve(Socket s) {
  const auto leaf = ca_.forge_cached(logical_.host);
  auto victim = tls_server(std::move(s), ctx_.get(), leaf->identity());
  if (!victim->handshake(deadline_in(5s)).completed) return;
  ++sessions_;
  std::unique_ptr<TlsStream> real;
  try {
    real = open_unverified(*onward_, logical_, deadline_in(5s));
  } catch (const NetError&) {
    return;
  }
  TapStream tap(*victim, [this](ByteView b) {
    std::lock_guard lock(mu_);
    captured_.insert(captured_.end(), b.begin(), b.end());
  });
  relay(tap, *real, 2s);
}

Lab::Lab(LabOptions options)
    : options_(std::move(options)),
      public_root_(CertAuthority::generate(ca_options("Sim Public Root", "Sim Trust Services"))),
      public_intermediate_(public_root_.issue_subordinate("Sim Public Issuing CA", 365)),
      ca_(CertAuthority::generate(CaOptions{})),
      attacker_ca_(CertAuthority::generate(ca_options("Rogue Interception CA", "Rogue"))) {
  public_trust_.add(public_root_.certificate());

  const auto leaf = public_intermediate_.forge_leaf(options_.upstream_host);
  upstream_leaf_der_ = x509_to_der(leaf.certificate.get());
  upstream_ = std::make_unique<UpstreamServer>(leaf.identity());
  upstream_->start();
  echo_ = std::make_unique<EchoServer>();
  echo_->start();

  device_net_ = std::make_shared<NetworkMap>();
  backbone_ = std::make_shared<NetworkMap>();
  backbone_->route(upstream_logical(), upstream_->endpoint());
  backbone_->route(echo_logical(), echo_->endpoint());

  const auto oracle_leaf = ca_.forge_leaf(options_.oracle_host);
  OracleServerOptions oopts;
  oopts.rate_limit_per_minute = 0;
  oopts.fetch_timeout = 5s;
  oopts.dialer = backbone_;
  oopts.capture_requests = true;
  oracle_ = std::make_unique<OracleServer>(oracle_leaf.identity(), oopts);
  oracle_->start();
  backbone_->route(oracle_logical(), oracle_->endpoint());

  upstream_attacker_ = std::make_unique<RogueMitm>(attacker_ca_, upstream_logical(), backbone_);
  oracle_attacker_ = std::make_unique<RogueMitm>(attacker_ca_, oracle_logical(), backbone_);
  upstream_attacker_->start();
  oracle_attacker_->start();
  device_net_->route(echo_logical(), echo_->endpoint());
  place_attacker(Placement::None);

  // The pin goes through the same sealed keystore format a deployment uses.
  const Bytes mac_key = random_bytes(32);
  auto pin = verify_keystore(serialize_keystore(oracle_leaf.certificate.get(), mac_key), mac_key);
  auto oracle_client = std::make_shared<OracleClient>(oracle_logical(), std::move(pin), device_net_, 5s);

  EnforcerOptions eopts;
  eopts.direct_timeout = 5s;
  eopts.upstream_trust = public_trust_;
  enforcer_ = std::make_shared<Enforcer>(device_net_, oracle_client, eopts);

  store_ = WhitelistStore::in_memory();
  verdicts_ = std::make_shared<VerdictLog>();
  events_ = std::make_shared<EventBus>();
  policy_ = std::make_shared<PolicyState>(Policy{options_.mode, {}, options_.pending_timeout});
  decisions_ = std::make_shared<DecisionQueue>();
  resolver_ = std::make_shared<TableResolver>();

  PentesterOptions popts;
  popts.decision_window = options_.decision_window;
  ProxyDeps deps;
  deps.pentester = std::make_shared<Pentester>(ca_, popts);
  deps.enforcer = enforcer_;
  deps.store = store_;
  deps.recorder = std::make_shared<VerdictRecorder>(store_, verdicts_);
  deps.resolver = resolver_;
  deps.dialer = device_net_;
  deps.events = events_;
  deps.policy = policy_;
  deps.decisions = decisions_;
  ProxyOptions popt;
  popt.connect_timeout = 5s;
  popt.header_timeout = 5s;
  popt.idle_timeout = 5s;
  proxy_ = std::make_unique<ProxyServer>(popt, std::move(deps));
  proxy_->start();

  if (options_.start_admin) {
    admin_ = std::make_unique<AdminApi>(AdminDeps{events_, decisions_, store_, policy_, proxy_.get()});
    admin_->start();
  }
}

Lab::~Lab() {
  if (admin_) admin_->stop();
  proxy_->stop();
  upstream_attacker_->stop();
  oracle_attacker_->stop();
  oracle_->stop();
  echo_->stop();
  upstream_->stop();
}

void Lab::place_attacker(Placement p) {
  const bool on_upstream = p == Placement::UpstreamPath || p == Placement::Both;
  const bool on_oracle = p == Placement::OraclePath || p == Placement::Both;
  device_net_->route(upstream_logical(), on_upstream ? upstream_attacker_->endpoint() : upstream_->endpoint());
  device_net_->route(oracle_logical(), on_oracle ? oracle_attacker_->endpoint() : oracle_->endpoint());
  placement_ = p;
}

ClientContext Lab::client_context(bool via_proxy) const {
  ClientContext c;
  c.dialer = device_net_.get();
  if (via_proxy) c.proxy = proxy_->endpoint();
  c.target = upstream_logical();
  c.trust = &public_trust_;
  c.pin = upstream_leaf_der_;
  c.resolver = resolver_.get();
  return c;
}

ClientResult Lab::request(const SyntheticClient& client, const ClientRequest& request) {
  return run_client(client, client_context(true), request);
}

ClientResult Lab::request_direct(const SyntheticClient& client, const ClientRequest& request) {
  return run_client(client, client_context(false), request);
}

std::optional<FlowRecord> Lab::flow_for(const ClientResult& result) const {
  proxy_->wait_idle(10s);
  std::optional<FlowRecord> best;
  for (auto& f : proxy_->flows()) {
    if (f.client_port == result.local_port && (!best || f.flow_id > best->flow_id)) best = std::move(f);
  }
  return best;
}

HttpsUrl Lab::upstream_url() const { return HttpsUrl{options_.upstream_host, 443, "/"}; }
Endpoint Lab::upstream_logical() const { return {options_.upstream_host, 443}; }
Endpoint Lab::oracle_logical() const { return {options_.oracle_host, options_.oracle_port}; }
Endpoint Lab::echo_logical() const { return {options_.echo_host, options_.echo_port}; }

std::string Lab::intermediate_subject() const {
  return name_to_string(X509_get_subject_name(public_intermediate_.certificate()));
}

std::string Lab::proxy_ca_subject() const { return name_to_string(X509_get_subject_name(ca_.certificate())); }

bool DetectionRow::as_expected() const {
  return !verdicts.empty() &&
         std::all_of(verdicts.begin(), verdicts.end(), [this](VerdictValue v) { return v == expected; });
}

bool DetectionReport::passed() const {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const DetectionRow& r) { return r.as_expected(); });
}

std::string DetectionReport::to_json() const {
  json j;
  j["elapsed_ms"] = elapsed.count();
  j["passed"] = passed();
  j["rows"] = json::array();
  for (const auto& r : rows) {
    json counts = json::object();
    for (auto v : r.verdicts) counts[std::string(to_string(v))] = counts.value(std::string(to_string(v)), 0) + 1;
    json ev = json::array();
    for (const auto& e : r.evidence) ev.push_back(e ? json(std::string(to_string(*e))) : json(nullptr));
    j["rows"].push_back({{"client", r.client.name},
                         {"version", r.client.version},
                         {"behavior", std::string(to_string(r.client.behavior))},
                         {"expected", std::string(to_string(r.expected))},
                         {"runs", r.verdicts.size()},
                         {"counts", counts},
                         {"evidence", ev},
                         {"retries", r.retries},
                         {"as_expected", r.as_expected()}});
  }
  return j.dump(2);
}

std::string DetectionReport::to_table() const {
  std::ostringstream out;
  out << std::left << std::setw(16) << "client" << std::setw(8) << "kind" << std::setw(12) << "expected"
      << std::setw(8) << "runs" << std::setw(8) << "match" << std::setw(8) << "retries" << "ok\n";
  for (const auto& r : rows) {
    const auto match = std::count(r.verdicts.begin(), r.verdicts.end(), r.expected);
    out << std::setw(16) << r.client.name << std::setw(8) << to_string(r.client.behavior) << std::setw(12)
        << to_string(r.expected) << std::setw(8) << r.verdicts.size() << std::setw(8) << match << std::setw(8)
        << r.retries << (r.as_expected() ? "yes" : "NO") << "\n";
  }
  out << "elapsed " << elapsed.count() << " ms\n";
  return out.str();
}

DetectionReport run_detection_matrix(Lab& lab, const std::vector<SyntheticClient>& clients, std::size_t runs) {
  constexpr std::size_t kRetries = 3;
  DetectionReport report;
  const auto start = SteadyClock::now();
  for (const auto& client : clients) {
    DetectionRow row;
    row.client = client;
    row.expected = expected_verdict(client.behavior);
    for (std::size_t run = 0; run < runs; ++run) {
      std::optional<Verdict> verdict;
      for (std::size_t attempt = 0; attempt <= kRetries; ++attempt) {
        if (attempt > 0) ++row.retries;
        lab.store().remove(client.name, client.version);
        const auto result = lab.request(client, login_request());
        const auto flow = lab.flow_for(result);
        if (flow && flow->verdict_at_time && flow->verdict_at_time->value != VerdictValue::Untested) {
          verdict = flow->verdict_at_time;
          break;
        }
      }
      row.verdicts.push_back(verdict ? verdict->value : VerdictValue::Untested);
      row.evidence.push_back(verdict ? verdict->evidence : std::nullopt);
    }
    report.rows.push_back(std::move(row));
  }
  report.elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - start);
  return report;
}

bool AttackRow::as_expected() const {
  return !actions.empty() && leaked_bytes == 0 &&
         std::all_of(actions.begin(), actions.end(), [this](const auto& a) { return a && *a == expected; });
}

bool AttackReport::passed() const {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const AttackRow& r) { return r.as_expected(); });
}

std::string AttackReport::to_json() const {
  json j;
  j["elapsed_ms"] = elapsed.count();
  j["passed"] = passed();
  j["rows"] = json::array();
  for (const auto& r : rows) {
    json counts = json::object();
    for (const auto& a : r.actions) {
      const std::string k = a ? std::string(to_string(*a)) : "none_recorded";
      counts[k] = counts.value(k, 0) + 1;
    }
    j["rows"].push_back({{"placement", std::string(to_string(r.placement))},
                         {"expected", std::string(to_string(r.expected))},
                         {"trials", r.actions.size()},
                         {"counts", counts},
                         {"leaked_bytes", r.leaked_bytes},
                         {"as_expected", r.as_expected()}});
  }
  return j.dump(2);
}

std::string AttackReport::to_table() const {
  std::ostringstream out;
  out << std::left << std::setw(15) << "placement" << std::setw(28) << "expected" << std::setw(8) << "trials"
      << std::setw(8) << "match" << std::setw(8) << "leaked" << "ok\n";
  for (const auto& r : rows) {
    const auto match =
        std::count_if(r.actions.begin(), r.actions.end(), [&r](const auto& a) { return a && *a == r.expected; });
    out << std::setw(15) << to_string(r.placement) << std::setw(28) << to_string(r.expected) << std::setw(8)
        << r.actions.size() << std::setw(8) << match << std::setw(8) << r.leaked_bytes
        << (r.as_expected() ? "yes" : "NO") << "\n";
  }
  out << "elapsed " << elapsed.count() << " ms\n";
  return out.str();
}

AttackReport run_attack_matrix(Lab& lab, const std::vector<Placement>& placements, std::size_t trials) {
  const SyntheticClient victim{Behavior::Naive, "naive-victim", "1.0"};
  AttackReport report;
  const auto start = SteadyClock::now();
  for (auto placement : placements) {
    AttackRow row;
    row.placement = placement;
    row.expected = expected_action(placement);
    for (std::size_t t = 0; t < trials; ++t) {
      lab.enforcer().clear_cache();
      lab.upstream_attacker().clear();
      lab.oracle_attacker().clear();
      lab.place_attacker(placement);
      const auto result = lab.request(victim, login_request());
      const auto flow = lab.flow_for(result);
      row.actions.push_back(flow && flow->enforcement ? std::optional(flow->enforcement->action) : std::nullopt);
      row.leaked_bytes += lab.upstream_attacker().captured().size() + lab.oracle_attacker().captured().size();
    }
    report.rows.push_back(std::move(row));
  }
  lab.place_attacker(Placement::None);
  lab.enforcer().clear_cache();
  report.elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - start);
  return report;
}

DurationStats DurationStats::of(std::vector<double> samples) {
  DurationStats s;
  s.n = samples.size();
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  const auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
    return samples[std::clamp<std::size_t>(idx, 1, samples.size()) - 1];
  };
  const auto n = samples.size();
  s.median_ms = n % 2 == 1 ? samples[n / 2] : (samples[n / 2 - 1] + samples[n / 2]) / 2.0;
  s.p95_ms = rank(0.95);
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean_ms = sum / static_cast<double>(n);
  s.min_ms = samples.front();
  s.max_ms = samples.back();
  return s;
}

namespace {

json stats_json(const DurationStats& s) {
  return {{"n", s.n}, {"median_ms", s.median_ms}, {"p95_ms", s.p95_ms}, {"mean_ms", s.mean_ms},
          {"min_ms", s.min_ms}, {"max_ms", s.max_ms}};
}

}  // namespace

std::string BenchReport::to_json() const {
  json j = {{"scenario", scenario},
            {"baseline_ms", stats_json(baseline)},
            {"protected_ms", stats_json(protected_run)},
            {"overhead_ratio", overhead_ratio},
            {"fetches_new_host", fetches_new_host},
            {"fetches_cached_host", fetches_cached_host},
            {"failed_requests", failed_requests},
            {"valid", valid}};
  if (!valid) j["invalid_reason"] = invalid_reason;
  return j.dump(2);
}

std::string BenchReport::to_table() const {
  std::ostringstream out;
  out << scenario << "\n";
  out << std::left << std::setw(12) << "run" << std::setw(6) << "n" << std::setw(12) << "median_ms" << std::setw(12)
      << "p95_ms" << "mean_ms\n";
  for (const auto& [name, s] : {std::pair{"baseline", baseline}, std::pair{"protected", protected_run}}) {
    out << std::setw(12) << name << std::setw(6) << s.n << std::setw(12) << fmt_ms(s.median_ms) << std::setw(12)
        << fmt_ms(s.p95_ms) << fmt_ms(s.mean_ms) << "\n";
  }
  out << "overhead_ratio " << fmt_ms(overhead_ratio) << "\n";
  out << "fetches new host " << fetches_new_host << ", cached host " << fetches_cached_host << "\n";
  out << "valid " << (valid ? "yes" : "no: " + invalid_reason) << "\n";
  return out.str();
}

BenchReport run_overhead_bench(Lab& lab, const BenchOptions& options) {
  BenchReport report;
  report.scenario = "login-like exchange of " + std::to_string(options.requests_per_trial) +
                    " sequential HTTPS requests, " + std::to_string(options.trials) + " trials, " +
                    (options.cold ? "cold" : "warm") + " chain cache";
  const SyntheticClient baseline_client{Behavior::Strict, "bench-strict", "1.0"};
  const SyntheticClient protected_client{Behavior::Naive, "bench-naive", "1.0"};
  lab.place_attacker(Placement::None);
  auto& enforcer = lab.enforcer();

  enforcer.set_cache_enabled(true);
  enforcer.clear_cache();
  enforcer.reset_counters();
  lab.request(protected_client);
  lab.proxy().wait_idle(10s);
  report.fetches_new_host = enforcer.direct_fetches() + enforcer.oracle_fetches();
  enforcer.reset_counters();
  lab.request(protected_client);
  lab.proxy().wait_idle(10s);
  report.fetches_cached_host = enforcer.direct_fetches() + enforcer.oracle_fetches();

  // The baseline client earns its whitelist entry first.
  lab.request(baseline_client);
  lab.proxy().wait_idle(10s);
  if (!lab.store().lookup(baseline_client.name, baseline_client.version)) {
    report.valid = false;
    report.invalid_reason = "baseline client was not whitelisted";
    return report;
  }

  const auto trial = [&](const SyntheticClient& client) {
    const auto start = SteadyClock::now();
    for (std::size_t i = 0; i < options.requests_per_trial; ++i) {
      if (lab.request(client, login_request()).status != 200) ++report.failed_requests;
    }
    return to_ms(SteadyClock::now() - start);
  };

  enforcer.set_cache_enabled(!options.cold);
  trial(baseline_client);
  trial(protected_client);
  report.failed_requests = 0;
  std::vector<double> base;
  std::vector<double> prot;
  for (std::size_t t = 0; t < options.trials; ++t) {
    base.push_back(trial(baseline_client));
    prot.push_back(trial(protected_client));
  }
  enforcer.set_cache_enabled(true);
  lab.proxy().wait_idle(10s);

  report.baseline = DurationStats::of(std::move(base));
  report.protected_run = DurationStats::of(std::move(prot));
  report.overhead_ratio =
      report.baseline.median_ms > 0 ? report.protected_run.median_ms / report.baseline.median_ms : 0.0;
  if (options.trials < 30) {
    report.valid = false;
    report.invalid_reason = "fewer than 30 trials";
  } else if (report.baseline.median_ms <= 0 || report.baseline.p95_ms / report.baseline.median_ms > 5.0) {
    report.valid = false;
    report.invalid_reason = "baseline unstable (p95/median > 5)";
  } else if (report.failed_requests > 0) {
    report.valid = false;
    report.invalid_reason = std::to_string(report.failed_requests) + " requests failed";
  } else if (!std::isfinite(report.overhead_ratio)) {
    report.valid = false;
    report.invalid_reason = "overhead ratio not finite";
  }
  return report;
}

std::size_t run_concurrent(Lab& lab, std::size_t n) {
  std::atomic<std::size_t> ok{0};
  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    threads.emplace_back([&lab, &ok, i] {
      const SyntheticClient c{Behavior::Naive, "parallel-" + std::to_string(i % 5), "1.0"};
      if (lab.request(c).status == 200) ++ok;
    });
  }
  for (auto& t : threads) t.join();
  lab.proxy().wait_idle(30s);
  return ok.load();
}

}  // namespace certwarden::sim
