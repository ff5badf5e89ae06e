#include "certwarden/cert_authority.hpp"

#include <openssl/err.h>
#include <openssl/rand.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <mutex>
#include <random>

namespace certwarden {

using namespace std::chrono_literals;

std::optional<KeyProfile> parse_key_profile(std::string_view name) {
  if (name == "default" || name == "ec-p256") return KeyProfile::EcP256;
  if (name == "rsa-2048") return KeyProfile::Rsa2048;
  return std::nullopt;
}

std::string_view to_string(KeyProfile profile) {
  switch (profile) {
    case KeyProfile::EcP256:
      return "ec-p256";
    case KeyProfile::Rsa2048:
      return "rsa-2048";
  }
  return "unknown";
}

EvpPkeyPtr generate_key(KeyProfile profile) {
  EvpPkeyPtr key;
  switch (profile) {
    case KeyProfile::EcP256:
      key.reset(EVP_EC_gen("P-256"));
      break;
    case KeyProfile::Rsa2048:
      key.reset(EVP_RSA_gen(2048));
      break;
  }
  if (!key) throw_crypto_error("key generation");
  return key;
}

bool is_valid_host(std::string_view host, bool allow_wildcard) {
  if (host.empty()) return false;
  if (is_ip_literal(host)) return true;
  if (host.size() > 253) return false;
  if (allow_wildcard && host.starts_with("*.")) host.remove_prefix(2);
  std::size_t start = 0;
  bool all_numeric = true;
  while (start <= host.size()) {
    const auto dot = host.find('.', start);
    const auto label = host.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
    if (label.empty() || label.size() > 63) return false;
    if (label.front() == '-' || label.back() == '-') return false;
    for (char c : label) {
      const bool alpha = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
      const bool digit = c >= '0' && c <= '9';
      if (!alpha && !digit && c != '-') return false;
      if (!digit) all_numeric = false;
    }
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  // "1.2.3" style strings are malformed IPs, not names.
  return !all_numeric;
}

namespace {

void set_time(ASN1_TIME* field, SystemTime t) {
  if (ASN1_TIME_set(field, std::chrono::system_clock::to_time_t(t)) == nullptr) {
    throw_crypto_error("ASN1_TIME_set");
  }
}

void add_extension(X509* cert, X509* issuer, int nid, const std::string& value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value.c_str());
  if (ext == nullptr) throw_crypto_error("extension " + value);
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

void add_name_entry(X509_NAME* name, const char* field, const std::string& value) {
  if (value.empty()) return;
  if (X509_NAME_add_entry_by_txt(name, field, MBSTRING_UTF8,
                                 reinterpret_cast<const unsigned char*>(value.data()),
                                 static_cast<int>(value.size()), -1, 0) != 1) {
    throw_crypto_error(std::string("name entry ") + field);
  }
}

void sign(X509* cert, EVP_PKEY* key) {
  if (X509_sign(cert, key, EVP_sha256()) <= 0) throw_crypto_error("X509_sign");
}

std::uint64_t random_serial_base() {
  std::uint64_t v = 0;
  if (RAND_bytes(reinterpret_cast<unsigned char*>(&v), sizeof(v)) != 1) throw_crypto_error("RAND_bytes");
  // Positive, with headroom so the counter never wraps.
  return (v >> 2) | 1;
}

std::uint64_t seeded_serial_base(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return (rng() >> 2) | 1;
}

}  // namespace

struct CertAuthority::State {
  X509Ptr certificate;
  EvpPkeyPtr key;
  KeyProfile profile = KeyProfile::EcP256;
  std::vector<X509Ptr> issuers;
  SystemTime not_before{};
  SystemTime not_after{};
  std::atomic<std::uint64_t> serial{1};

  std::mutex cache_mu;
  std::map<std::string, std::shared_ptr<const ForgedLeaf>, std::less<>> cache;
};

UpstreamLeafInfo UpstreamLeafInfo::from_certificate(const X509* cert) {
  UpstreamLeafInfo info;
  info.subject.reset(X509_NAME_dup(X509_get_subject_name(cert)));
  info.not_before = asn1_time_to_time_point(X509_get0_notBefore(cert));
  info.not_after = asn1_time_to_time_point(X509_get0_notAfter(cert));
  GeneralNamesPtr names(static_cast<GENERAL_NAMES*>(X509_get_ext_d2i(cert, NID_subject_alt_name, nullptr, nullptr)));
  if (names) {
    for (int i = 0; i < sk_GENERAL_NAME_num(names.get()); ++i) {
      const GENERAL_NAME* gn = sk_GENERAL_NAME_value(names.get(), i);
      if (gn->type == GEN_DNS) {
        const auto* s = gn->d.dNSName;
        info.dns_names.emplace_back(reinterpret_cast<const char*>(ASN1_STRING_get0_data(s)),
                                    static_cast<std::size_t>(ASN1_STRING_length(s)));
      } else if (gn->type == GEN_IPADD) {
        char* text = i2s_ASN1_OCTET_STRING(nullptr, gn->d.iPAddress);
        if (text != nullptr) {
          info.ip_addresses.emplace_back(text);
          OPENSSL_free(text);
        }
      }
    }
  }
  ERR_clear_error();
  return info;
}

ServerIdentity ForgedLeaf::identity() const {
  ServerIdentity id;
  id.certificate = share(certificate.get());
  id.key = share(private_key.get());
  for (const auto& c : chain) id.chain.push_back(share(c.get()));
  return id;
}

CertAuthority CertAuthority::generate(const CaOptions& options) {
  if (options.validity_days < 1) throw CaError("validity_days must be >= 1");
  auto state = std::make_shared<State>();
  state->profile = options.profile;
  state->key = generate_key(options.profile);
  state->serial = options.seed ? seeded_serial_base(*options.seed) : random_serial_base();

  const auto now = options.now.value_or(std::chrono::system_clock::now());
  state->not_before = std::chrono::time_point_cast<std::chrono::seconds>(now);
  state->not_after = state->not_before + std::chrono::hours(24) * options.validity_days;

  X509Ptr cert(X509_new());
  X509_set_version(cert.get(), X509_VERSION_3);
  ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert.get()), state->serial.fetch_add(1));
  set_time(X509_getm_notBefore(cert.get()), state->not_before);
  set_time(X509_getm_notAfter(cert.get()), state->not_after);
  X509_NAME* name = X509_get_subject_name(cert.get());
  add_name_entry(name, "O", options.organization);
  add_name_entry(name, "CN", options.common_name);
  X509_set_issuer_name(cert.get(), name);
  X509_set_pubkey(cert.get(), state->key.get());
  add_extension(cert.get(), cert.get(), NID_basic_constraints, "critical,CA:TRUE");
  add_extension(cert.get(), cert.get(), NID_key_usage, "critical,keyCertSign,cRLSign");
  add_extension(cert.get(), cert.get(), NID_subject_key_identifier, "hash");
  sign(cert.get(), state->key.get());
  state->certificate = std::move(cert);
  return CertAuthority(std::move(state));
}

CertAuthority CertAuthority::load(std::string_view certificate_pem, std::string_view key_pem) {
  auto state = std::make_shared<State>();
  state->certificate = x509_from_pem(certificate_pem);
  state->key = private_key_from_pem(key_pem);
  if (!state->certificate) throw CaError("unparseable CA certificate");
  if (!state->key) throw CaError("unparseable CA private key");
  if (X509_check_private_key(state->certificate.get(), state->key.get()) != 1) {
    ERR_clear_error();
    throw CaError("CA key does not match certificate");
  }
  if (X509_check_ca(state->certificate.get()) == 0) throw CaError("certificate is not a CA");
  state->profile = EVP_PKEY_get_base_id(state->key.get()) == EVP_PKEY_RSA ? KeyProfile::Rsa2048 : KeyProfile::EcP256;
  state->not_before = asn1_time_to_time_point(X509_get0_notBefore(state->certificate.get()));
  state->not_after = asn1_time_to_time_point(X509_get0_notAfter(state->certificate.get()));
  state->serial = random_serial_base();
  return CertAuthority(std::move(state));
}

X509* CertAuthority::certificate() const { return state_->certificate.get(); }
EVP_PKEY* CertAuthority::private_key() const { return state_->key.get(); }
KeyProfile CertAuthority::profile() const { return state_->profile; }
std::string CertAuthority::certificate_pem() const { return x509_to_pem(state_->certificate.get()); }
std::string CertAuthority::private_key_pem() const { return private_key_to_pem(state_->key.get()); }
SystemTime CertAuthority::not_before() const { return state_->not_before; }
SystemTime CertAuthority::not_after() const { return state_->not_after; }
const std::vector<X509Ptr>& CertAuthority::issuer_chain() const { return state_->issuers; }

bool CertAuthority::valid_at(SystemTime t) const { return t >= state_->not_before && t <= state_->not_after; }

std::uint64_t CertAuthority::next_serial() const { return state_->serial.fetch_add(1, std::memory_order_relaxed); }

ForgedLeaf CertAuthority::forge_leaf(std::string_view host, const UpstreamLeafInfo* upstream,
                                     std::optional<SystemTime> now_opt) const {
  if (!is_valid_host(host)) throw CaError("malformed host: " + std::string(host));
  const auto now = now_opt.value_or(std::chrono::system_clock::now());
  if (now > state_->not_after) throw CaError("CA expired");
  if (now < state_->not_before) throw CaError("CA not yet valid");

  ForgedLeaf leaf;
  leaf.target_host = std::string(host);
  leaf.private_key = generate_key(state_->profile);

  X509Ptr cert(X509_new());
  X509_set_version(cert.get(), X509_VERSION_3);
  ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert.get()), next_serial());

  if (upstream != nullptr) {
    set_time(X509_getm_notBefore(cert.get()), upstream->not_before);
    set_time(X509_getm_notAfter(cert.get()), upstream->not_after);
  } else {
    set_time(X509_getm_notBefore(cert.get()), now - 1h);
    set_time(X509_getm_notAfter(cert.get()), now + std::chrono::hours(24 * 30));
  }

  X509NamePtr subject(X509_NAME_new());
  if (upstream != nullptr && upstream->subject) {
    const X509_NAME* src = upstream->subject.get();
    for (int i = 0; i < X509_NAME_entry_count(src); ++i) {
      const X509_NAME_ENTRY* e = X509_NAME_get_entry(src, i);
      if (OBJ_obj2nid(X509_NAME_ENTRY_get_object(e)) == NID_commonName) continue;
      X509_NAME_add_entry(subject.get(), e, -1, 0);
    }
  }
  add_name_entry(subject.get(), "CN", leaf.target_host);
  X509_set_subject_name(cert.get(), subject.get());
  X509_set_issuer_name(cert.get(), X509_get_subject_name(state_->certificate.get()));
  X509_set_pubkey(cert.get(), leaf.private_key.get());

  const bool ip = is_ip_literal(host);
  std::vector<std::string> san{(ip ? "IP:" : "DNS:") + leaf.target_host};
  if (upstream != nullptr) {
    for (const auto& d : upstream->dns_names) {
      if (is_valid_host(d, true)) san.push_back("DNS:" + d);
    }
    for (const auto& a : upstream->ip_addresses) san.push_back("IP:" + a);
  }
  std::string san_text;
  for (std::size_t i = 0; i < san.size(); ++i) {
    if (std::find(san.begin(), san.begin() + static_cast<long>(i), san[i]) != san.begin() + static_cast<long>(i)) continue;
    if (!san_text.empty()) san_text += ",";
    san_text += san[i];
  }

  add_extension(cert.get(), state_->certificate.get(), NID_basic_constraints, "critical,CA:FALSE");
  add_extension(cert.get(), state_->certificate.get(), NID_key_usage, "critical,digitalSignature,keyEncipherment");
  add_extension(cert.get(), state_->certificate.get(), NID_ext_key_usage, "serverAuth");
  add_extension(cert.get(), state_->certificate.get(), NID_subject_alt_name, san_text);
  add_extension(cert.get(), state_->certificate.get(), NID_subject_key_identifier, "hash");
  add_extension(cert.get(), state_->certificate.get(), NID_authority_key_identifier, "keyid:always");
  sign(cert.get(), state_->key.get());
  leaf.certificate = std::move(cert);

  // Subordinate CAs ship their own certificate plus everything above it
  // except the self-signed root.
  if (!state_->issuers.empty()) {
    leaf.chain.push_back(share(state_->certificate.get()));
    for (std::size_t i = 0; i + 1 < state_->issuers.size(); ++i) leaf.chain.push_back(share(state_->issuers[i].get()));
  }
  return leaf;
}

std::shared_ptr<const ForgedLeaf> CertAuthority::forge_cached(std::string_view host,
                                                              std::optional<SystemTime> now_opt) const {
  const auto now = now_opt.value_or(std::chrono::system_clock::now());
  {
    std::lock_guard lock(state_->cache_mu);
    const auto it = state_->cache.find(host);
    if (it != state_->cache.end()) {
      const X509* c = it->second->certificate.get();
      if (now >= asn1_time_to_time_point(X509_get0_notBefore(c)) &&
          now + 1h < asn1_time_to_time_point(X509_get0_notAfter(c))) {
        return it->second;
      }
    }
  }
  auto leaf = std::make_shared<const ForgedLeaf>(forge_leaf(host, nullptr, now));
  std::lock_guard lock(state_->cache_mu);
  state_->cache[std::string(host)] = leaf;
  return leaf;
}

CertAuthority CertAuthority::issue_subordinate(const std::string& common_name, int validity_days,
                                               std::optional<SystemTime> now_opt) const {
  if (validity_days < 1) throw CaError("validity_days must be >= 1");
  const auto now = now_opt.value_or(std::chrono::system_clock::now());
  if (!valid_at(now)) throw CaError("CA expired");
  auto state = std::make_shared<State>();
  state->profile = state_->profile;
  state->key = generate_key(state_->profile);
  state->serial = random_serial_base();
  state->not_before = std::chrono::time_point_cast<std::chrono::seconds>(now) - 1h;
  state->not_after = std::min(state->not_before + std::chrono::hours(24) * validity_days, state_->not_after);

  X509Ptr cert(X509_new());
  X509_set_version(cert.get(), X509_VERSION_3);
  ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert.get()), next_serial());
  set_time(X509_getm_notBefore(cert.get()), state->not_before);
  set_time(X509_getm_notAfter(cert.get()), state->not_after);
  X509_NAME* name = X509_get_subject_name(cert.get());
  add_name_entry(name, "O", name_entry(X509_get_subject_name(state_->certificate.get()), NID_organizationName));
  add_name_entry(name, "CN", common_name);
  X509_set_issuer_name(cert.get(), X509_get_subject_name(state_->certificate.get()));
  X509_set_pubkey(cert.get(), state->key.get());
  add_extension(cert.get(), state_->certificate.get(), NID_basic_constraints, "critical,CA:TRUE,pathlen:0");
  add_extension(cert.get(), state_->certificate.get(), NID_key_usage, "critical,keyCertSign,cRLSign");
  add_extension(cert.get(), state_->certificate.get(), NID_subject_key_identifier, "hash");
  add_extension(cert.get(), state_->certificate.get(), NID_authority_key_identifier, "keyid:always");
  sign(cert.get(), state_->key.get());
  state->certificate = std::move(cert);

  state->issuers.push_back(share(state_->certificate.get()));
  for (const auto& c : state_->issuers) state->issuers.push_back(share(c.get()));
  return CertAuthority(std::move(state));
}

Bytes serialize_keystore(const X509* oracle_certificate, ByteView mac_key) {
  const Bytes der = x509_to_der(oracle_certificate);
  Bytes out;
  out.reserve(4 + der.size() + 32);
  const auto len = static_cast<std::uint32_t>(der.size());
  out.push_back(static_cast<std::uint8_t>(len >> 24));
  out.push_back(static_cast<std::uint8_t>(len >> 16));
  out.push_back(static_cast<std::uint8_t>(len >> 8));
  out.push_back(static_cast<std::uint8_t>(len));
  out.insert(out.end(), der.begin(), der.end());
  const Bytes mac = hmac_sha256(mac_key, out);
  out.insert(out.end(), mac.begin(), mac.end());
  return out;
}

PinnedKeystore verify_keystore(ByteView store_bytes, ByteView mac_key) {
  constexpr std::size_t kMacSize = 32;
  if (store_bytes.size() < 4 + 1 + kMacSize) {
    throw KeystoreError(KeystoreError::Kind::Parse, "keystore too short");
  }
  const auto body = store_bytes.first(store_bytes.size() - kMacSize);
  const auto trailer = store_bytes.last(kMacSize);
  if (!secure_equal(hmac_sha256(mac_key, body), trailer)) {
    throw KeystoreError(KeystoreError::Kind::Tampered, "keystore tampered");
  }
  const std::uint32_t len = static_cast<std::uint32_t>(body[0]) << 24 | static_cast<std::uint32_t>(body[1]) << 16 |
                            static_cast<std::uint32_t>(body[2]) << 8 | body[3];
  if (len != body.size() - 4) throw KeystoreError(KeystoreError::Kind::Parse, "keystore length mismatch");
  PinnedKeystore ks;
  ks.oracle_der.assign(body.begin() + 4, body.end());
  ks.oracle_certificate = x509_from_der(ks.oracle_der);
  if (!ks.oracle_certificate) throw KeystoreError(KeystoreError::Kind::Parse, "keystore certificate unparseable");
  std::copy(trailer.begin(), trailer.end(), ks.integrity_digest.begin());
  return ks;
}

}  // namespace certwarden
