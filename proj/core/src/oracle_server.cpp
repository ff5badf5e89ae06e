#include "certwarden/oracle_server.hpp"

#include <atomic>
#include <cctype>
#include <charconv>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

#include "certwarden/chain_model.hpp"
#include "certwarden/events.hpp"
#include "httplib.h"
#include "json.hpp"

namespace certwarden {

std::string HttpsUrl::to_string() const {
  std::string h = host.find(':') != std::string::npos ? "[" + host + "]" : host;
  if (port != 443) h += ":" + std::to_string(port);
  return "https://" + h + path;
}

std::optional<HttpsUrl> parse_https_url(std::string_view url, UrlError* error) {
  auto fail = [&](UrlError e) -> std::optional<HttpsUrl> {
    if (error) *error = e;
    return std::nullopt;
  };
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) return fail(UrlError::InvalidScheme);
  std::string scheme(url.substr(0, scheme_end));
  for (auto& c : scheme) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (scheme != "https") return fail(UrlError::InvalidScheme);

  auto rest = url.substr(scheme_end + 3);
  const auto path_start = rest.find_first_of("/?#");
  auto authority = rest.substr(0, path_start);
  HttpsUrl out;
  if (path_start != std::string_view::npos) {
    out.path = std::string(rest.substr(path_start));
    if (out.path.front() != '/') out.path.insert(out.path.begin(), '/');
    const auto frag = out.path.find('#');
    if (frag != std::string::npos) out.path.resize(frag);
  }
  if (authority.empty() || authority.find('@') != std::string_view::npos) return fail(UrlError::InvalidUrl);

  std::string_view host = authority;
  std::string_view port;
  if (authority.front() == '[') {
    const auto close = authority.find(']');
    if (close == std::string_view::npos) return fail(UrlError::InvalidUrl);
    host = authority.substr(1, close - 1);
    const auto after = authority.substr(close + 1);
    if (!after.empty()) {
      if (after.front() != ':') return fail(UrlError::InvalidUrl);
      port = after.substr(1);
    }
  } else if (const auto colon = authority.rfind(':'); colon != std::string_view::npos) {
    host = authority.substr(0, colon);
    port = authority.substr(colon + 1);
  }
  if (host.empty()) return fail(UrlError::InvalidUrl);
  out.host = std::string(host);
  if (!port.empty() || authority.back() == ':') {
    unsigned value = 0;
    const auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
    if (ec != std::errc{} || p != port.data() + port.size() || value == 0 || value > 65535) {
      return fail(UrlError::InvalidUrl);
    }
    out.port = static_cast<std::uint16_t>(value);
  }
  return out;
}

bool is_allowed_method(std::string_view method) {
  return method == "GET" || method == "POST" || method == "HEAD" || method == "PUT" || method == "DELETE";
}

struct OracleServer::Impl {
  ServerIdentity identity;
  OracleServerOptions options;
  std::unique_ptr<httplib::SSLServer> server;
  std::thread thread;
  std::uint16_t port = 0;
  std::atomic<std::uint64_t> fetches{0};

  std::mutex rate_mu;
  std::map<std::string, std::deque<SteadyClock::time_point>> windows;

  mutable std::mutex capture_mu;
  std::vector<CapturedOracleRequest> captured;

  bool allow(const std::string& peer) {
    if (options.rate_limit_per_minute <= 0) return true;
    const auto now = SteadyClock::now();
    std::lock_guard lock(rate_mu);
    auto& w = windows[peer];
    while (!w.empty() && now - w.front() >= std::chrono::minutes(1)) w.pop_front();
    if (w.size() >= static_cast<std::size_t>(options.rate_limit_per_minute)) return false;
    w.push_back(now);
    return true;
  }

  void handle(const httplib::Request& req, httplib::Response& res) {
    if (options.capture_requests) {
      CapturedOracleRequest c{req.remote_addr, req.method, req.target, {}, req.body};
      for (const auto& [k, v] : req.headers) c.headers.emplace_back(k, v);
      std::lock_guard lock(capture_mu);
      captured.push_back(std::move(c));
    }
    auto error = [&](int status, const char* code) {
      res.status = status;
      res.set_content(nlohmann::json{{"error", code}}.dump(), "application/json");
    };
    if (!allow(req.remote_addr)) return error(429, "rate_limited");
    if (!req.has_param("url")) return error(400, "missing_url");
    const std::string method = req.has_param("method") ? req.get_param_value("method") : "GET";
    if (!is_allowed_method(method)) return error(400, "invalid_method");
    UrlError why{};
    const auto url = parse_https_url(req.get_param_value("url"), &why);
    if (!url) return error(400, why == UrlError::InvalidScheme ? "invalid_scheme" : "invalid_url");

    fetches.fetch_add(1);
    const auto deadline = deadline_in(options.fetch_timeout);
    std::vector<Bytes> chain;
    try {
      auto tls = open_unverified(*options.dialer, url->endpoint(), deadline);
      chain = tls->peer_chain_der();
      // Honor the method for connection semantics; the answer is discarded.
      std::string probe = method + " " + url->path + " HTTP/1.1\r\nHost: " + url->host + "\r\nConnection: close\r\n";
      if (method == "POST" || method == "PUT") probe += "Content-Length: 0\r\n";
      probe += "\r\n";
      try {
        tls->write_all(probe, deadline);
        tls->read_to_end(std::min(deadline, deadline_in(std::chrono::seconds(2))));
      } catch (const NetError&) {
      }
    } catch (const NetError& e) {
      switch (e.kind()) {
        case NetError::Kind::ConnectFailed:
          return error(502, "unreachable");
        case NetError::Kind::Timeout:
          return error(504, "timeout");
        default:
          return error(502, "tls_failed");
      }
    }
    try {
      const auto parsed = parse_chain(chain);
      res.set_header("X-Fetched-At", std::to_string(unix_millis()));
      res.set_content(serialize_chain(parsed), "application/json");
    } catch (const ChainParseError&) {
      error(502, "unparseable_chain");
    }
  }
};

OracleServer::OracleServer(const ServerIdentity& identity, OracleServerOptions options)
    : impl_(std::make_unique<Impl>()) {
  impl_->identity.certificate = share(identity.certificate.get());
  impl_->identity.key = share(identity.key.get());
  if (!options.dialer) options.dialer = std::make_shared<SystemDialer>();
  impl_->options = std::move(options);
}

OracleServer::~OracleServer() { stop(); }

void OracleServer::start() {
  auto& s = *impl_;
  if (s.server) return;
  s.server = std::make_unique<httplib::SSLServer>(s.identity.certificate.get(), s.identity.key.get());
  if (!s.server->is_valid()) throw std::runtime_error("oracle: invalid TLS identity");
  s.server->set_read_timeout(std::chrono::seconds(5));
  s.server->Get("/getSSLCertificate",
                [&s](const httplib::Request& req, httplib::Response& res) { s.handle(req, res); });
  if (s.options.port == 0) {
    const int p = s.server->bind_to_any_port(s.options.bind_host);
    if (p <= 0) throw std::runtime_error("oracle: cannot bind " + s.options.bind_host);
    s.port = static_cast<std::uint16_t>(p);
  } else {
    if (!s.server->bind_to_port(s.options.bind_host, s.options.port)) {
      throw std::runtime_error("oracle: cannot bind " + s.options.bind_host + ":" + std::to_string(s.options.port));
    }
    s.port = s.options.port;
  }
  s.thread = std::thread([&s] { s.server->listen_after_bind(); });
  s.server->wait_until_ready();
}

void OracleServer::stop() {
  if (!impl_ || !impl_->server) return;
  impl_->server->stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->server.reset();
}

std::uint16_t OracleServer::port() const { return impl_->port; }

Endpoint OracleServer::endpoint() const { return {impl_->options.bind_host, impl_->port}; }

std::uint64_t OracleServer::fetch_count() const { return impl_->fetches.load(); }

std::vector<CapturedOracleRequest> OracleServer::captured() const {
  std::lock_guard lock(impl_->capture_mu);
  return impl_->captured;
}

void OracleServer::clear_captured() {
  std::lock_guard lock(impl_->capture_mu);
  impl_->captured.clear();
}

}  // namespace certwarden
