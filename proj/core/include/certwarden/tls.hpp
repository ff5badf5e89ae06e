#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "certwarden/net.hpp"
#include "certwarden/ossl.hpp"

namespace certwarden {

/// What happened during a handshake, as observed from our side.
struct HandshakeOutcome {
  bool completed = false;
  bool timed_out = false;
  /// A ClientHello arrived (server side only).
  bool client_hello_seen = false;
  /// The peer sent a TLS alert.
  bool alert_received = false;
  int alert_description = -1;
  /// Transport EOF/reset without an alert.
  bool peer_closed = false;
  std::string error;
};

class TlsStream final : public Stream {
 public:
  TlsStream(Socket socket, SslPtr ssl);
  TlsStream(const TlsStream&) = delete;
  TlsStream& operator=(const TlsStream&) = delete;
  ~TlsStream() override;

  HandshakeOutcome handshake(Deadline deadline);
  /// Throws NetError describing the failure.
  void handshake_or_throw(Deadline deadline);

  IoResult try_read(std::span<std::uint8_t> buf) override;
  IoResult try_write(ByteView data) override;
  bool has_buffered() const override;
  void shutdown_write() override;
  int fd() const override { return socket_.fd(); }

  SSL* ssl() const { return ssl_.get(); }
  Socket& socket() { return socket_; }

  /// Peer certificates as presented on the wire, leaf first. On the server
  /// side this is empty unless the client sent certificates.
  std::vector<Bytes> peer_chain_der() const;
  X509Ptr peer_leaf() const;

  bool alert_received() const { return alert_received_; }
  bool client_hello_seen() const { return client_hello_seen_; }

 private:
  static void on_message(int write_p, int version, int content_type, const void* buf, std::size_t len,
                         SSL* ssl, void* arg);

  Socket socket_;
  SslPtr ssl_;
  bool alert_received_ = false;
  int alert_description_ = -1;
  bool client_hello_seen_ = false;
  bool shutdown_sent_ = false;
};

/// Shared X509_STORE with convenience loaders.
class TrustStore {
 public:
  TrustStore();
  static TrustStore system_default();

  void add(X509* cert);
  /// Loads every certificate from a PEM bundle. Returns the count added.
  std::size_t add_pem(std::string_view pem);
  X509_STORE* get() const { return store_.get(); }

 private:
  std::shared_ptr<X509_STORE> store_;
};

/// TLS 1.2+ server context without session tickets.
SslCtxPtr make_server_ctx();
/// TLS 1.2+ client context. Without a trust store, peer verification is off
/// and the handshake accepts whatever is presented.
SslCtxPtr make_client_ctx(const TrustStore* trust = nullptr);

struct ServerIdentity {
  X509Ptr certificate;
  EvpPkeyPtr key;
  /// Extra certificates sent after the leaf.
  std::vector<X509Ptr> chain;
};

std::unique_ptr<TlsStream> tls_server(Socket socket, SSL_CTX* ctx, const ServerIdentity& identity);
/// `sni` doubles as the expected host name when the context verifies peers.
std::unique_ptr<TlsStream> tls_client(Socket socket, SSL_CTX* ctx, const std::string& sni);

/// Runs a standard path validation with host name check over a presented
/// chain (leaf first).
bool verify_presented_chain(const std::vector<Bytes>& chain_der, const TrustStore& trust,
                            const std::string& host, std::string* error = nullptr);

/// Connects through `dialer` and completes a handshake without validating
/// anything. Throws NetError.
std::unique_ptr<TlsStream> open_unverified(const Dialer& dialer, const Endpoint& target, Deadline deadline);

/// The chain exactly as the answering server presents it, leaf first.
std::vector<Bytes> fetch_presented_chain(const Dialer& dialer, const Endpoint& target, Deadline deadline);

}  // namespace certwarden
