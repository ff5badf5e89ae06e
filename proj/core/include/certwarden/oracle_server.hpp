#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "certwarden/net.hpp"
#include "certwarden/tls.hpp"

namespace certwarden {

struct HttpsUrl {
  std::string host;
  std::uint16_t port = 443;
  std::string path = "/";

  Endpoint endpoint() const { return {host, port}; }
  std::string to_string() const;
};

enum class UrlError { InvalidScheme, InvalidUrl };

/// Only https URLs are accepted; anything else reports InvalidScheme.
std::optional<HttpsUrl> parse_https_url(std::string_view url, UrlError* error = nullptr);

/// GET, POST, HEAD, PUT, DELETE.
bool is_allowed_method(std::string_view method);

/// Request as seen by the oracle, kept for audits of what clients send.
struct CapturedOracleRequest {
  std::string peer;
  std::string method;
  std::string target;  // path with query string
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
};

struct OracleServerOptions {
  std::string bind_host = "127.0.0.1";
  std::uint16_t port = 0;
  /// Requests per minute per peer address; 0 disables the limit.
  int rate_limit_per_minute = 60;
  std::chrono::milliseconds fetch_timeout{10000};
  /// Path to targets. Defaults to the system resolver.
  std::shared_ptr<const Dialer> dialer;
  bool capture_requests = false;
};

/// HTTPS service answering GET /getSSLCertificate?url=<u>&method=<m> with
/// {"chain":[...]} for whatever the target presents, or {"error":"<code>"}.
/// The fetch time travels in the X-Fetched-At header (unix ms) so the body
/// stays identical to serialize_chain output.
class OracleServer {
 public:
  OracleServer(const ServerIdentity& identity, OracleServerOptions options);
  ~OracleServer();
  OracleServer(const OracleServer&) = delete;
  OracleServer& operator=(const OracleServer&) = delete;

  /// Binds and starts serving in the background. Throws on bind failure.
  void start();
  void stop();
  std::uint16_t port() const;
  Endpoint endpoint() const;

  std::uint64_t fetch_count() const;
  std::vector<CapturedOracleRequest> captured() const;
  void clear_captured();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace certwarden
