#include "certwarden/service.hpp"

#include <fstream>
#include <sstream>
#include <system_error>

#include <sys/stat.h>

namespace certwarden {

namespace fs = std::filesystem;

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, std::string_view text, bool private_file) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw ConfigError("cannot write " + tmp.string());
  }
  if (private_file) ::chmod(tmp.c_str(), 0600);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw ConfigError("cannot replace " + path.string() + ": " + ec.message());
}

Bytes load_key(const fs::path& file, const std::string& env_var, const EnvLookup& env) {
  if (env) {
    if (const auto v = env(env_var)) {
      auto key = parse_store_key(*v);
      if (!key) throw ConfigError(env_var + " must hold 64 hex characters");
      return *key;
    }
  }
  auto key = parse_store_key(read_text_file(file));
  if (!key) throw ConfigError(file.string() + " must hold 64 hex characters");
  return *key;
}

std::vector<fs::path> init_material(const Config& c, bool force) {
  const std::vector<fs::path> targets = {c.resolve(c.ca_cert),         c.resolve(c.ca_key),
                                         c.resolve(c.oracle_cert),     c.resolve(c.oracle_key),
                                         c.resolve(c.keystore_path),   c.resolve(c.keystore_key_file),
                                         c.resolve(c.store_key_file)};
  if (!force) {
    for (const auto& p : targets) {
      if (fs::exists(p)) throw ConfigError(p.string() + " exists; pass --force to replace it");
    }
  }
  const auto oracle_url = parse_https_url(c.oracle_endpoint);
  if (!oracle_url) throw ConfigError("oracle_endpoint must be an https URL");

  CaOptions opts;
  opts.validity_days = c.ca_validity_days;
  opts.profile = c.key_profile;
  const auto ca = CertAuthority::generate(opts);

  // The oracle leaf lives as long as the CA so the pin does not silently
  // expire under a running deployment.
  UpstreamLeafInfo window;
  window.not_before = ca.not_before();
  window.not_after = ca.not_after();
  const auto oracle = ca.forge_leaf(oracle_url->host, &window);

  const Bytes keystore_key = random_bytes(kStoreKeySize);
  const Bytes store_key = random_bytes(kStoreKeySize);
  const Bytes keystore = serialize_keystore(oracle.certificate.get(), keystore_key);

  write_text_file(targets[0], ca.certificate_pem());
  write_text_file(targets[1], ca.private_key_pem(), true);
  write_text_file(targets[2], x509_to_pem(oracle.certificate.get()));
  write_text_file(targets[3], private_key_to_pem(oracle.private_key.get()), true);
  write_text_file(targets[4], to_string(keystore));
  write_text_file(targets[5], hex_encode(keystore_key) + "\n", true);
  write_text_file(targets[6], hex_encode(store_key) + "\n", true);
  return targets;
}

CertAuthority load_ca(const Config& c) {
  return CertAuthority::load(read_text_file(c.resolve(c.ca_cert)), read_text_file(c.resolve(c.ca_key)));
}

ServerIdentity load_oracle_identity(const Config& c) {
  ServerIdentity id;
  id.certificate = x509_from_pem(read_text_file(c.resolve(c.oracle_cert)));
  id.key = private_key_from_pem(read_text_file(c.resolve(c.oracle_key)));
  if (!id.certificate || !id.key) throw ConfigError("unreadable oracle certificate or key");
  return id;
}

PinnedKeystore load_keystore(const Config& c, const EnvLookup& env) {
  const auto key = load_key(c.resolve(c.keystore_key_file), kKeystoreKeyEnv, env);
  const auto text = read_text_file(c.resolve(c.keystore_path));
  return verify_keystore(as_bytes(text), key);
}

ProxyService::ProxyService(const Config& c, ServiceOverrides o, const EnvLookup& env) : ca_(load_ca(c)) {
  const auto oracle_url = parse_https_url(c.oracle_endpoint);
  if (!oracle_url) throw ConfigError("oracle_endpoint must be an https URL");
  auto pin = o.keystore ? std::move(*o.keystore) : load_keystore(c, env);

  store_ = o.store ? o.store : WhitelistStore::open(c.resolve(c.store_path), load_key(c.resolve(c.store_key_file), kStoreKeyEnv, env));
  events_ = std::make_shared<EventBus>();
  if (!c.event_log.empty()) {
    event_log_ = std::make_shared<JsonLinesFile>(c.resolve(c.event_log));
    events_->add_sink(event_log_->sink());
  }
  policy_ = std::make_shared<PolicyState>(Policy{c.mode, c.manual_selection, c.pending_timeout});
  decisions_ = std::make_shared<DecisionQueue>();
  verdicts_ = c.verdict_log.empty() ? std::make_shared<VerdictLog>()
                                    : std::make_shared<VerdictLog>(c.resolve(c.verdict_log));

  auto system_dialer = std::make_shared<SystemDialer>();
  std::shared_ptr<const Dialer> upstream = o.upstream_dialer ? o.upstream_dialer : system_dialer;
  std::shared_ptr<const Dialer> oracle_dialer = o.oracle_dialer ? o.oracle_dialer : system_dialer;

  auto oracle = std::make_shared<OracleClient>(oracle_url->endpoint(), std::move(pin), oracle_dialer, c.oracle_timeout);

  EnforcerOptions eopts;
  eopts.direct_timeout = c.direct_timeout;
  eopts.cache_ttl = c.cache_ttl;
  if (o.upstream_trust) {
    eopts.upstream_trust = *o.upstream_trust;
  }
  if (!c.extra_trust.empty()) eopts.upstream_trust.add_pem(read_text_file(c.resolve(c.extra_trust)));
  enforcer_ = std::make_shared<Enforcer>(upstream, oracle, std::move(eopts));

  PentesterOptions popts;
  popts.decision_window = c.decision_window;

  std::shared_ptr<SocketResolver> resolver = o.resolver;
  if (!resolver) {
    VersionMap versions(c.client_versions.begin(), c.client_versions.end());
    resolver = std::make_shared<ProcfsResolver>("/proc", std::move(versions));
  }

  ProxyDeps deps;
  deps.pentester = std::make_shared<Pentester>(ca_, popts);
  deps.enforcer = enforcer_;
  deps.store = store_;
  deps.recorder = std::make_shared<VerdictRecorder>(store_, verdicts_);
  deps.resolver = std::move(resolver);
  deps.dialer = upstream;
  deps.events = events_;
  deps.policy = policy_;
  deps.decisions = decisions_;

  ProxyOptions popt;
  popt.bind_host = c.proxy_host;
  popt.port = c.proxy_port;
  popt.idle_timeout = c.idle_timeout;
  proxy_ = std::make_unique<ProxyServer>(popt, std::move(deps));

  const auto admin_ep = c.admin_endpoint();
  admin_ = std::make_unique<AdminApi>(AdminDeps{events_, decisions_, store_, policy_, proxy_.get()}, admin_ep.host,
                                      admin_ep.port);
}

ProxyService::~ProxyService() { stop(); }

void ProxyService::start() {
  proxy_->start();
  admin_->start();
}

void ProxyService::stop() {
  if (admin_) admin_->stop();
  if (proxy_) proxy_->stop();
}

std::unique_ptr<OracleServer> make_oracle_server(const Config& c, std::shared_ptr<const Dialer> dialer) {
  const auto ep = c.oracle_bind_endpoint();
  OracleServerOptions opts;
  opts.bind_host = ep.host;
  opts.port = ep.port;
  opts.rate_limit_per_minute = c.oracle_rate_limit;
  opts.fetch_timeout = c.direct_timeout;
  opts.dialer = std::move(dialer);
  return std::make_unique<OracleServer>(load_oracle_identity(c), opts);
}

}  // namespace certwarden
