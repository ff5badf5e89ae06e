#include "certwarden/chain_model.hpp"

#include <openssl/err.h>

#include <algorithm>

#include "json.hpp"

namespace certwarden {

std::vector<Bytes> CertificateChain::der_list() const {
  std::vector<Bytes> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.raw_der);
  return out;
}

namespace {

CertificateEntry make_entry(ByteView der, std::size_t index) {
  X509Ptr cert = x509_from_der(der);
  if (!cert) throw ChainParseError("certificate " + std::to_string(index) + " is not valid DER");
  CertificateEntry e;
  e.raw_der.assign(der.begin(), der.end());
  e.subject_der = name_to_der(X509_get_subject_name(cert.get()));
  e.issuer_der = name_to_der(X509_get_issuer_name(cert.get()));
  e.subject = name_to_string(X509_get_subject_name(cert.get()));
  e.issuer = name_to_string(X509_get_issuer_name(cert.get()));

  const ASN1_BIT_STRING* sig = nullptr;
  X509_get0_signature(&sig, nullptr, cert.get());
  if (sig == nullptr) throw ChainParseError("certificate " + std::to_string(index) + " has no signature");
  e.signature.assign(ASN1_STRING_get0_data(sig), ASN1_STRING_get0_data(sig) + ASN1_STRING_length(sig));

  unsigned char* spki = nullptr;
  const int spki_len = i2d_X509_PUBKEY(X509_get_X509_PUBKEY(cert.get()), &spki);
  if (spki_len <= 0) throw ChainParseError("certificate " + std::to_string(index) + " has no public key");
  e.public_key_info.assign(spki, spki + spki_len);
  OPENSSL_free(spki);

  try {
    e.not_before = asn1_time_to_time_point(X509_get0_notBefore(cert.get()));
    e.not_after = asn1_time_to_time_point(X509_get0_notAfter(cert.get()));
  } catch (const CryptoError&) {
    throw ChainParseError("certificate " + std::to_string(index) + " has an invalid validity field");
  }
  ERR_clear_error();
  return e;
}

}  // namespace

CertificateChain parse_chain(const std::vector<Bytes>& wire) {
  if (wire.empty()) throw ChainParseError("empty chain");
  CertificateChain chain;
  chain.entries_.reserve(wire.size());
  for (std::size_t i = 0; i < wire.size(); ++i) chain.entries_.push_back(make_entry(wire[i], i));
  return chain;
}

CertificateChain normalize_order(const CertificateChain& chain) {
  std::vector<const CertificateEntry*> unique;
  for (const auto& e : chain.entries_) {
    const bool dup = std::any_of(unique.begin(), unique.end(),
                                 [&](const CertificateEntry* u) { return u->raw_der == e.raw_der; });
    if (!dup) unique.push_back(&e);
  }

  auto flagged = [&] {
    CertificateChain out;
    for (const auto* e : unique) out.entries_.push_back(*e);
    out.unlinkable_ = true;
    return out;
  };

  // A leaf is something no other entry claims as its issuer.
  std::vector<const CertificateEntry*> leaves;
  for (const auto* e : unique) {
    const bool issues_another = std::any_of(unique.begin(), unique.end(), [&](const CertificateEntry* other) {
      return other != e && other->issuer_der == e->subject_der;
    });
    if (!issues_another) leaves.push_back(e);
  }
  if (unique.size() == 1) {
    CertificateChain out;
    out.entries_.push_back(*unique.front());
    return out;
  }
  if (leaves.size() != 1) return flagged();

  std::vector<const CertificateEntry*> ordered{leaves.front()};
  std::vector<bool> used(unique.size(), false);
  used[static_cast<std::size_t>(std::find(unique.begin(), unique.end(), leaves.front()) - unique.begin())] = true;
  while (ordered.size() < unique.size()) {
    const auto* current = ordered.back();
    if (current->self_issued()) break;
    std::optional<std::size_t> next;
    for (std::size_t i = 0; i < unique.size(); ++i) {
      if (used[i] || unique[i]->subject_der != current->issuer_der) continue;
      if (next) return flagged();
      next = i;
    }
    if (!next) break;
    used[*next] = true;
    ordered.push_back(unique[*next]);
  }
  if (ordered.size() != unique.size()) return flagged();

  CertificateChain out;
  for (const auto* e : ordered) out.entries_.push_back(*e);
  return out;
}

std::string_view to_string(ChainComparison::Reason reason) {
  switch (reason) {
    case ChainComparison::Reason::LengthMismatch:
      return "LengthMismatch";
    case ChainComparison::Reason::SignatureMismatch:
      return "SignatureMismatch";
    case ChainComparison::Reason::UnlinkableChain:
      return "UnlinkableChain";
  }
  return "Unknown";
}

ChainComparison compare_chains(const CertificateChain& a, const CertificateChain& b) {
  ChainComparison result;
  const std::size_t common = std::min(a.size(), b.size());
  std::optional<std::size_t> first_sig_mismatch;
  bool der_equal = a.size() == b.size();
  for (std::size_t i = 0; i < common; ++i) {
    if (!first_sig_mismatch && a[i].signature != b[i].signature) first_sig_mismatch = i;
    if (a[i].raw_der != b[i].raw_der) der_equal = false;
  }
  result.raw_der_equal = der_equal;

  if (a.unlinkable() || b.unlinkable()) {
    result.reason = ChainComparison::Reason::UnlinkableChain;
    return result;
  }
  if (a.size() != b.size()) {
    result.reason = ChainComparison::Reason::LengthMismatch;
    result.first_divergence = first_sig_mismatch.value_or(common);
    return result;
  }
  if (first_sig_mismatch) {
    result.reason = ChainComparison::Reason::SignatureMismatch;
    result.first_divergence = first_sig_mismatch;
    return result;
  }
  result.matched = true;
  return result;
}

std::string serialize_chain(const CertificateChain& chain) {
  nlohmann::json doc;
  auto& arr = doc["chain"] = nlohmann::json::array();
  for (const auto& e : chain.entries()) arr.push_back(base64_encode(e.raw_der));
  return doc.dump();
}

CertificateChain deserialize_chain(std::string_view json_text) {
  nlohmann::json doc = nlohmann::json::parse(json_text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw ChainParseError("chain document is not a JSON object");
  const auto it = doc.find("chain");
  if (it == doc.end() || !it->is_array()) throw ChainParseError("missing \"chain\" array");
  std::vector<Bytes> wire;
  for (const auto& item : *it) {
    if (!item.is_string()) throw ChainParseError("chain element is not a string");
    auto der = base64_decode(item.get<std::string>());
    if (!der) throw ChainParseError("chain element is not valid base64");
    wire.push_back(std::move(*der));
  }
  return parse_chain(wire);
}

}  // namespace certwarden
