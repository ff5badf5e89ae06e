#include "certwarden/enforcer.hpp"

#include <cctype>
#include <charconv>

namespace certwarden {

namespace {

struct HttpReply {
  int status = 0;
  std::string body;
};

HttpReply read_reply(Stream& s, Deadline deadline) {
  const auto head = s.read_until("\r\n\r\n", 16 * 1024, deadline);
  if (!head) throw NetError(NetError::Kind::Closed, "oracle closed before replying");
  HttpReply reply;
  // "HTTP/1.1 200 OK"
  const auto sp = head->find(' ');
  if (head->rfind("HTTP/1.", 0) != 0 || sp == std::string::npos || head->size() < sp + 4) {
    throw NetError(NetError::Kind::Io, "malformed oracle reply");
  }
  std::from_chars(head->data() + sp + 1, head->data() + sp + 4, reply.status);

  std::optional<std::size_t> length;
  std::size_t pos = head->find("\r\n") + 2;
  while (pos < head->size()) {
    const auto eol = head->find("\r\n", pos);
    const auto line = std::string_view(*head).substr(pos, eol - pos);
    pos = eol + 2;
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    std::string name(line.substr(0, colon));
    for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    auto value = line.substr(colon + 1);
    while (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    if (name == "content-length") {
      std::size_t n = 0;
      if (std::from_chars(value.data(), value.data() + value.size(), n).ec == std::errc{}) length = n;
    }
  }
  if (length) {
    reply.body.resize(*length);
    std::size_t got = 0;
    while (got < *length) {
      const auto n = s.read_some({reinterpret_cast<std::uint8_t*>(reply.body.data()) + got, *length - got}, deadline);
      if (n == 0) throw NetError(NetError::Kind::Closed, "oracle reply truncated");
      got += n;
    }
  } else {
    reply.body = s.read_to_end(deadline);
  }
  return reply;
}

}  // namespace

OracleClient::OracleClient(Endpoint oracle, PinnedKeystore pin, std::shared_ptr<const Dialer> dialer,
                           std::chrono::milliseconds timeout)
    : oracle_(std::move(oracle)), pin_(std::move(pin)), dialer_(std::move(dialer)), timeout_(timeout) {}

OracleClient::Result OracleClient::fetch(const HttpsUrl& target, std::string_view method) const {
  Result out;
  const auto deadline = deadline_in(timeout_);
  std::unique_ptr<TlsStream> tls;
  try {
    tls = open_unverified(*dialer_, oracle_, deadline);
  } catch (const NetError& e) {
    out.failure = Failure::Unreachable;
    out.detail = e.what();
    return out;
  }
  const auto presented = tls->peer_chain_der();
  if (presented.empty() || presented.front() != pin_.oracle_der) {
    // Nothing is sent to an unpinned peer.
    out.failure = Failure::PinMismatch;
    out.detail = "oracle certificate does not match the pinned keystore";
    tls->socket().reset();
    return out;
  }

  const std::string request = "GET /getSSLCertificate?url=" + url_encode(target.to_string()) +
                              "&method=" + url_encode(method) + " HTTP/1.1\r\nHost: " + oracle_.to_string() +
                              "\r\nConnection: close\r\n\r\n";
  try {
    tls->write_all(request, deadline);
    const auto reply = read_reply(*tls, deadline);
    if (reply.status != 200) {
      out.failure = Failure::Unreachable;
      out.detail = "oracle error " + std::to_string(reply.status) + ": " + reply.body;
      return out;
    }
    out.chain = deserialize_chain(reply.body);
  } catch (const NetError& e) {
    out.failure = Failure::Unreachable;
    out.detail = e.what();
  } catch (const ChainParseError& e) {
    out.failure = Failure::Unreachable;
    out.detail = std::string("oracle reply unusable: ") + e.what();
  }
  return out;
}

std::string_view to_string(EnforcementAction action) {
  switch (action) {
    case EnforcementAction::Forwarded:
      return "Forwarded";
    case EnforcementAction::BlockedMismatch:
      return "BlockedMismatch";
    case EnforcementAction::BlockedOracleUnreachable:
      return "BlockedOracleUnreachable";
    case EnforcementAction::BlockedPinFailure:
      return "BlockedPinFailure";
    case EnforcementAction::BlockedUpstreamUnreachable:
      return "BlockedUpstreamUnreachable";
    case EnforcementAction::BlockedUntrustedUpstream:
      return "BlockedUntrustedUpstream";
  }
  return "?";
}

Enforcer::Enforcer(std::shared_ptr<const Dialer> upstream_dialer, std::shared_ptr<const OracleClient> oracle,
                   EnforcerOptions options)
    : dialer_(std::move(upstream_dialer)),
      oracle_(std::move(oracle)),
      options_(std::move(options)),
      cache_enabled_(options_.cache_enabled) {}

void Enforcer::reset_counters() {
  direct_fetches_ = 0;
  oracle_fetches_ = 0;
}

void Enforcer::clear_cache() {
  std::lock_guard lock(cache_mu_);
  cache_.clear();
  poisoned_.clear();
}

void Enforcer::set_cache_enabled(bool on) {
  std::lock_guard lock(cache_mu_);
  cache_enabled_ = on;
  if (!on) cache_.clear();
}

bool Enforcer::poisoned(const Endpoint& target) const {
  std::lock_guard lock(cache_mu_);
  return poisoned_.count(target) != 0;
}

std::optional<CertificateChain> Enforcer::cached(const Endpoint& target) {
  std::lock_guard lock(cache_mu_);
  if (!cache_enabled_ || poisoned_.count(target)) return std::nullopt;
  const auto it = cache_.find(target);
  if (it == cache_.end()) return std::nullopt;
  if (options_.clock() >= it->second.expires) {
    cache_.erase(it);
    return std::nullopt;
  }
  return it->second.chain;
}

void Enforcer::remember(const Endpoint& target, const CertificateChain& chain) {
  std::lock_guard lock(cache_mu_);
  if (!cache_enabled_ || poisoned_.count(target)) return;
  cache_[target] = {chain, options_.clock() + options_.cache_ttl};
}

void Enforcer::poison(const Endpoint& target) {
  std::lock_guard lock(cache_mu_);
  poisoned_.insert(target);
  cache_.erase(target);
}

EnforcementResult Enforcer::compare_fresh(const HttpsUrl& target, std::string_view method,
                                          std::optional<CertificateChain>& oracle_chain) {
  EnforcementResult r;
  std::optional<CertificateChain> direct;
  direct_fetches_.fetch_add(1);
  try {
    direct = normalize_order(parse_chain(fetch_presented_chain(*dialer_, target.endpoint(),
                                                               deadline_in(options_.direct_timeout))));
  } catch (const NetError& e) {
    r.action = EnforcementAction::BlockedUpstreamUnreachable;
    r.diagnostic = std::string("direct fetch: ") + e.what();
    return r;
  } catch (const ChainParseError& e) {
    r.action = EnforcementAction::BlockedMismatch;
    r.diagnostic = std::string("direct chain unparseable: ") + e.what();
    poison(target.endpoint());
    return r;
  }

  oracle_fetches_.fetch_add(1);
  auto via_oracle = oracle_->fetch(target, method);
  if (via_oracle.failure) {
    r.action = *via_oracle.failure == OracleClient::Failure::PinMismatch ? EnforcementAction::BlockedPinFailure
                                                                          : EnforcementAction::BlockedOracleUnreachable;
    r.diagnostic = via_oracle.detail;
    return r;
  }
  r.oracle_pin_ok = true;
  auto reference = normalize_order(*via_oracle.chain);
  r.comparison = compare_chains(*direct, reference);
  if (!r.comparison->matched) {
    r.action = EnforcementAction::BlockedMismatch;
    poison(target.endpoint());
    return r;
  }
  oracle_chain = std::move(reference);
  r.action = EnforcementAction::Forwarded;
  return r;
}

EnforcementResult Enforcer::check(const HttpsUrl& target, std::string_view method) {
  if (auto reference = cached(target.endpoint())) {
    // Still look at what the path presents now; only the oracle is skipped.
    EnforcementResult r;
    r.from_cache = true;
    r.oracle_pin_ok = true;
    direct_fetches_.fetch_add(1);
    try {
      const auto direct = normalize_order(parse_chain(
          fetch_presented_chain(*dialer_, target.endpoint(), deadline_in(options_.direct_timeout))));
      r.comparison = compare_chains(direct, *reference);
      r.upstream_trusted = verify_presented_chain(direct.der_list(), options_.upstream_trust, target.host);
    } catch (const NetError& e) {
      r.action = EnforcementAction::BlockedUpstreamUnreachable;
      r.diagnostic = e.what();
      return r;
    } catch (const ChainParseError& e) {
      r.comparison = ChainComparison{false, 0, ChainComparison::Reason::SignatureMismatch, false};
      r.diagnostic = e.what();
    }
    if (!r.comparison->matched) {
      r.action = EnforcementAction::BlockedMismatch;
      poison(target.endpoint());
    } else {
      r.action = r.upstream_trusted ? EnforcementAction::Forwarded : EnforcementAction::BlockedUntrustedUpstream;
    }
    return r;
  }

  std::optional<CertificateChain> reference;
  auto r = compare_fresh(target, method, reference);
  if (!r.forwarded()) return r;
  r.upstream_trusted = verify_presented_chain(reference->der_list(), options_.upstream_trust, target.host);
  if (!r.upstream_trusted) {
    r.action = EnforcementAction::BlockedUntrustedUpstream;
    return r;
  }
  remember(target.endpoint(), *reference);
  return r;
}

Enforcer::Session Enforcer::enforce(const HttpsUrl& target, std::string_view method) {
  Session s;
  auto& r = s.result;
  auto reference = cached(target.endpoint());
  const bool hit = reference.has_value();
  if (hit) {
    r.from_cache = true;
    r.oracle_pin_ok = true;
  } else {
    r = compare_fresh(target, method, reference);
    if (!r.forwarded()) return s;
  }

  // The forwarding session is a separate connection; its chain must match
  // the oracle's as well, so a path that changes between fetches is caught.
  try {
    s.upstream = open_unverified(*dialer_, target.endpoint(), deadline_in(options_.direct_timeout));
  } catch (const NetError& e) {
    r.action = EnforcementAction::BlockedUpstreamUnreachable;
    r.diagnostic = std::string("forwarding session: ") + e.what();
    return s;
  }
  const auto presented = s.upstream->peer_chain_der();
  try {
    const auto live = normalize_order(parse_chain(presented));
    const auto cmp = compare_chains(live, *reference);
    if (hit || !cmp.matched) r.comparison = cmp;
  } catch (const ChainParseError& e) {
    r.comparison = ChainComparison{false, 0, ChainComparison::Reason::SignatureMismatch, false};
    r.diagnostic = e.what();
  }
  if (!r.comparison || !r.comparison->matched) {
    r.action = EnforcementAction::BlockedMismatch;
    poison(target.endpoint());
    s.upstream->socket().reset();
    s.upstream.reset();
    return s;
  }
  std::string why;
  r.upstream_trusted = verify_presented_chain(presented, options_.upstream_trust, target.host, &why);
  if (!r.upstream_trusted) {
    r.action = EnforcementAction::BlockedUntrustedUpstream;
    r.diagnostic = why;
    s.upstream->socket().reset();
    s.upstream.reset();
    return s;
  }
  r.action = EnforcementAction::Forwarded;
  if (!hit) remember(target.endpoint(), *reference);
  return s;
}

}  // namespace certwarden
