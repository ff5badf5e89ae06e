#include "certwarden/tls.hpp"

#include <openssl/err.h>
#include <openssl/pem.h>

namespace certwarden {

TlsStream::TlsStream(Socket socket, SslPtr ssl) : socket_(std::move(socket)), ssl_(std::move(ssl)) {
  SSL_set_fd(ssl_.get(), socket_.fd());
  SSL_set_msg_callback(ssl_.get(), &TlsStream::on_message);
  SSL_set_msg_callback_arg(ssl_.get(), this);
}

TlsStream::~TlsStream() = default;

void TlsStream::on_message(int write_p, int /*version*/, int content_type, const void* buf,
                           std::size_t len, SSL* /*ssl*/, void* arg) {
  auto* self = static_cast<TlsStream*>(arg);
  if (write_p != 0 || len == 0) return;
  const auto* bytes = static_cast<const std::uint8_t*>(buf);
  if (content_type == SSL3_RT_ALERT && len >= 2) {
    // close_notify is an orderly close, not a rejection.
    if (bytes[1] != SSL_AD_CLOSE_NOTIFY) {
      self->alert_received_ = true;
      self->alert_description_ = bytes[1];
    }
  } else if (content_type == SSL3_RT_HANDSHAKE && bytes[0] == SSL3_MT_CLIENT_HELLO) {
    self->client_hello_seen_ = true;
  }
}

HandshakeOutcome TlsStream::handshake(Deadline deadline) {
  HandshakeOutcome out;
  for (;;) {
    ERR_clear_error();
    const int rc = SSL_do_handshake(ssl_.get());
    if (rc == 1) {
      out.completed = true;
      break;
    }
    const int err = SSL_get_error(ssl_.get(), rc);
    if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) {
      if (!wait_fd(socket_.fd(), err == SSL_ERROR_WANT_WRITE, deadline)) {
        out.timed_out = true;
        out.error = "handshake timeout";
        break;
      }
      continue;
    }
    out.error = drain_openssl_errors();
    if (out.error.empty()) out.error = "handshake failed (ssl error " + std::to_string(err) + ")";
    if (!alert_received_ &&
        (err == SSL_ERROR_SYSCALL || err == SSL_ERROR_ZERO_RETURN ||
         out.error.find("unexpected eof") != std::string::npos)) {
      out.peer_closed = true;
    }
    break;
  }
  out.client_hello_seen = client_hello_seen_;
  out.alert_received = alert_received_;
  out.alert_description = alert_description_;
  return out;
}

void TlsStream::handshake_or_throw(Deadline deadline) {
  const auto out = handshake(deadline);
  if (out.completed) return;
  if (out.timed_out) throw NetError(NetError::Kind::Timeout, out.error);
  throw NetError(NetError::Kind::Io, "TLS handshake: " + out.error);
}

IoResult TlsStream::try_read(std::span<std::uint8_t> buf) {
  ERR_clear_error();
  std::size_t n = 0;
  const int rc = SSL_read_ex(ssl_.get(), buf.data(), buf.size(), &n);
  if (rc == 1) return {IoStatus::Ok, n};
  const int err = SSL_get_error(ssl_.get(), rc);
  ERR_clear_error();
  switch (err) {
    case SSL_ERROR_WANT_READ:
      return {IoStatus::WouldBlock, 0, false};
    case SSL_ERROR_WANT_WRITE:
      return {IoStatus::WouldBlock, 0, true};
    case SSL_ERROR_ZERO_RETURN:
    case SSL_ERROR_SYSCALL:
      return {IoStatus::Eof, 0};
    default:
      return {IoStatus::Error, 0};
  }
}

IoResult TlsStream::try_write(ByteView data) {
  ERR_clear_error();
  std::size_t n = 0;
  const int rc = SSL_write_ex(ssl_.get(), data.data(), data.size(), &n);
  if (rc == 1) return {IoStatus::Ok, n};
  const int err = SSL_get_error(ssl_.get(), rc);
  ERR_clear_error();
  switch (err) {
    case SSL_ERROR_WANT_READ:
      return {IoStatus::WouldBlock, 0, false};
    case SSL_ERROR_WANT_WRITE:
      return {IoStatus::WouldBlock, 0, true};
    case SSL_ERROR_ZERO_RETURN:
    case SSL_ERROR_SYSCALL:
      return {IoStatus::Eof, 0};
    default:
      return {IoStatus::Error, 0};
  }
}

bool TlsStream::has_buffered() const { return SSL_pending(ssl_.get()) > 0; }

void TlsStream::shutdown_write() {
  if (shutdown_sent_) return;
  shutdown_sent_ = true;
  ERR_clear_error();
  SSL_shutdown(ssl_.get());
  ERR_clear_error();
}

std::vector<Bytes> TlsStream::peer_chain_der() const {
  std::vector<Bytes> out;
  STACK_OF(X509)* chain = SSL_get_peer_cert_chain(ssl_.get());
  if (chain == nullptr) return out;
  for (int i = 0; i < sk_X509_num(chain); ++i) out.push_back(x509_to_der(sk_X509_value(chain, i)));
  return out;
}

X509Ptr TlsStream::peer_leaf() const { return X509Ptr(SSL_get1_peer_certificate(ssl_.get())); }

TrustStore::TrustStore() : store_(X509_STORE_new(), X509_STORE_free) {
  if (!store_) throw_crypto_error("X509_STORE_new");
}

TrustStore TrustStore::system_default() {
  TrustStore t;
  X509_STORE_set_default_paths(t.get());
  ERR_clear_error();
  return t;
}

void TrustStore::add(X509* cert) {
  if (X509_STORE_add_cert(store_.get(), cert) != 1) {
    // Duplicates are harmless.
    ERR_clear_error();
  }
}

std::size_t TrustStore::add_pem(std::string_view pem) {
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  std::size_t count = 0;
  while (X509Ptr cert{PEM_read_bio_X509(bio.get(), nullptr, nullptr, nullptr)}) {
    add(cert.get());
    ++count;
  }
  ERR_clear_error();
  return count;
}

namespace {

void apply_common(SSL_CTX* ctx) {
  SSL_CTX_set_min_proto_version(ctx, TLS1_2_VERSION);
  SSL_CTX_set_options(ctx, SSL_OP_IGNORE_UNEXPECTED_EOF);
  SSL_CTX_set_session_cache_mode(ctx, SSL_SESS_CACHE_OFF);
  SSL_CTX_set_mode(ctx, SSL_MODE_ENABLE_PARTIAL_WRITE);
}

}  // namespace

SslCtxPtr make_server_ctx() {
  SslCtxPtr ctx(SSL_CTX_new(TLS_server_method()));
  if (!ctx) throw_crypto_error("SSL_CTX_new");
  apply_common(ctx.get());
  SSL_CTX_set_num_tickets(ctx.get(), 0);
  return ctx;
}

SslCtxPtr make_client_ctx(const TrustStore* trust) {
  SslCtxPtr ctx(SSL_CTX_new(TLS_client_method()));
  if (!ctx) throw_crypto_error("SSL_CTX_new");
  apply_common(ctx.get());
  if (trust != nullptr) {
    SSL_CTX_set1_cert_store(ctx.get(), trust->get());
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_PEER, nullptr);
  } else {
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_NONE, nullptr);
  }
  return ctx;
}

std::unique_ptr<TlsStream> tls_server(Socket socket, SSL_CTX* ctx, const ServerIdentity& identity) {
  SslPtr ssl(SSL_new(ctx));
  if (!ssl) throw_crypto_error("SSL_new");
  if (SSL_use_certificate(ssl.get(), identity.certificate.get()) != 1 ||
      SSL_use_PrivateKey(ssl.get(), identity.key.get()) != 1) {
    throw_crypto_error("install server identity");
  }
  for (const auto& extra : identity.chain) {
    if (SSL_add1_chain_cert(ssl.get(), extra.get()) != 1) throw_crypto_error("SSL_add1_chain_cert");
  }
  SSL_set_accept_state(ssl.get());
  return std::make_unique<TlsStream>(std::move(socket), std::move(ssl));
}

std::unique_ptr<TlsStream> tls_client(Socket socket, SSL_CTX* ctx, const std::string& sni) {
  SslPtr ssl(SSL_new(ctx));
  if (!ssl) throw_crypto_error("SSL_new");
  if (!sni.empty() && !is_ip_literal(sni)) SSL_set_tlsext_host_name(ssl.get(), sni.c_str());
  if (!sni.empty() && (SSL_CTX_get_verify_mode(ctx) & SSL_VERIFY_PEER) != 0) {
    SSL_set1_host(ssl.get(), sni.c_str());
  }
  SSL_set_connect_state(ssl.get());
  return std::make_unique<TlsStream>(std::move(socket), std::move(ssl));
}

bool verify_presented_chain(const std::vector<Bytes>& chain_der, const TrustStore& trust,
                            const std::string& host, std::string* error) {
  if (chain_der.empty()) {
    if (error) *error = "empty chain";
    return false;
  }
  std::vector<X509Ptr> certs;
  for (const auto& der : chain_der) {
    auto cert = x509_from_der(der);
    if (!cert) {
      if (error) *error = "unparseable certificate";
      return false;
    }
    certs.push_back(std::move(cert));
  }
  X509StackPtr untrusted(sk_X509_new_null());
  for (std::size_t i = 1; i < certs.size(); ++i) sk_X509_push(untrusted.get(), share(certs[i].get()).release());
  X509StoreCtxPtr ctx(X509_STORE_CTX_new());
  if (!ctx || X509_STORE_CTX_init(ctx.get(), trust.get(), certs[0].get(), untrusted.get()) != 1) {
    throw_crypto_error("X509_STORE_CTX_init");
  }
  X509_VERIFY_PARAM* param = X509_STORE_CTX_get0_param(ctx.get());
  X509_VERIFY_PARAM_set_purpose(param, X509_PURPOSE_SSL_SERVER);
  if (is_ip_literal(host)) {
    X509_VERIFY_PARAM_set1_ip_asc(param, host.c_str());
  } else {
    X509_VERIFY_PARAM_set1_host(param, host.c_str(), host.size());
  }
  const bool ok = X509_verify_cert(ctx.get()) == 1;
  if (!ok && error) *error = X509_verify_cert_error_string(X509_STORE_CTX_get_error(ctx.get()));
  ERR_clear_error();
  return ok;
}

std::unique_ptr<TlsStream> open_unverified(const Dialer& dialer, const Endpoint& target, Deadline deadline) {
  static const SslCtxPtr ctx = make_client_ctx();
  auto tls = tls_client(dialer.connect(target, deadline), ctx.get(), target.host);
  tls->handshake_or_throw(deadline);
  return tls;
}

std::vector<Bytes> fetch_presented_chain(const Dialer& dialer, const Endpoint& target, Deadline deadline) {
  auto tls = open_unverified(dialer, target, deadline);
  auto chain = tls->peer_chain_der();
  if (chain.empty()) throw NetError(NetError::Kind::Io, "server presented no certificate");
  tls->shutdown_write();
  return chain;
}

}  // namespace certwarden
