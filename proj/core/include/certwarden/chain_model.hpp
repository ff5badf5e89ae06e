#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "certwarden/bytes.hpp"
#include "certwarden/cert_authority.hpp"

namespace certwarden {

class ChainParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CertificateEntry {
  Bytes raw_der;
  /// DER encodings of the names; linking compares these bytewise.
  Bytes subject_der;
  Bytes issuer_der;
  std::string subject;
  std::string issuer;
  Bytes signature;
  Bytes public_key_info;
  SystemTime not_before{};
  SystemTime not_after{};

  bool self_issued() const { return subject_der == issuer_der; }
};

/// Ordered certificates as presented by a server. Never empty.
class CertificateChain {
 public:
  const std::vector<CertificateEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const CertificateEntry& operator[](std::size_t i) const { return entries_[i]; }
  const CertificateEntry& leaf() const { return entries_.front(); }
  /// Set by normalize_order when no unique issuer linking exists.
  bool unlinkable() const { return unlinkable_; }
  std::vector<Bytes> der_list() const;

 private:
  friend CertificateChain parse_chain(const std::vector<Bytes>& wire);
  friend CertificateChain normalize_order(const CertificateChain& chain);
  std::vector<CertificateEntry> entries_;
  bool unlinkable_ = false;
};

/// Fail-closed: any element that is not exactly one DER certificate rejects
/// the whole chain. Throws ChainParseError.
CertificateChain parse_chain(const std::vector<Bytes>& wire);

/// Leaf-first, issuer-linked order with byte-identical duplicates removed.
/// Chains without a unique linking come back in input order, flagged.
CertificateChain normalize_order(const CertificateChain& chain);

struct ChainComparison {
  enum class Reason { LengthMismatch, SignatureMismatch, UnlinkableChain };

  bool matched = false;
  std::optional<std::size_t> first_divergence;
  std::optional<Reason> reason;
  /// Diagnostic only: whole-certificate equality. Does not decide `matched`.
  bool raw_der_equal = false;

  friend bool operator==(const ChainComparison&, const ChainComparison&) = default;
};

std::string_view to_string(ChainComparison::Reason reason);

/// Position-wise signature comparison of two normalized chains. Matches iff
/// both are linkable, equally long, and every signature is byte-identical.
ChainComparison compare_chains(const CertificateChain& a, const CertificateChain& b);

/// {"chain":["<base64 DER>", ...]} in chain order.
std::string serialize_chain(const CertificateChain& chain);
/// Inverse of serialize_chain. Throws ChainParseError.
CertificateChain deserialize_chain(std::string_view json_text);

}  // namespace certwarden
