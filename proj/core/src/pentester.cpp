#include "certwarden/pentester.hpp"

#include <fstream>
#include <stdexcept>

#include "certwarden/events.hpp"
#include "json.hpp"

namespace certwarden {

std::string_view to_string(VerdictValue v) {
  switch (v) {
    case VerdictValue::Vulnerable:
      return "Vulnerable";
    case VerdictValue::PenProof:
      return "PenProof";
    case VerdictValue::Untested:
      return "Untested";
  }
  return "?";
}

std::string_view to_string(Evidence e) {
  switch (e) {
    case Evidence::HandshakeCompletedWithAppData:
      return "HandshakeCompletedWithAppData";
    case Evidence::HandshakeAborted:
      return "HandshakeAborted";
    case Evidence::ConnectionClosedSilent:
      return "ConnectionClosedSilent";
    case Evidence::Timeout:
      return "Timeout";
  }
  return "?";
}

std::optional<VerdictValue> parse_verdict_value(std::string_view s) {
  for (auto v : {VerdictValue::Vulnerable, VerdictValue::PenProof, VerdictValue::Untested}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::optional<Evidence> parse_evidence(std::string_view s) {
  for (auto e : {Evidence::HandshakeCompletedWithAppData, Evidence::HandshakeAborted,
                 Evidence::ConnectionClosedSilent, Evidence::Timeout}) {
    if (to_string(e) == s) return e;
  }
  return std::nullopt;
}

Pentester::Pentester(CertAuthority ca, PentesterOptions options)
    : ca_(std::move(ca)), options_(options), ctx_(make_server_ctx()) {}

PentestOutcome Pentester::pentest(Socket client, const std::string& host, const UpstreamLeafInfo* upstream) {
  PentestOutcome out;
  auto decide = [&](VerdictValue v, std::optional<Evidence> e, std::string detail = {}) {
    out.verdict.value = v;
    out.verdict.evidence = e;
    out.verdict.decided_at = std::chrono::system_clock::now();
    out.verdict.detail = std::move(detail);
  };

  std::shared_ptr<const ForgedLeaf> leaf;
  if (upstream && options_.mirror_upstream) {
    leaf = std::make_shared<const ForgedLeaf>(ca_.forge_leaf(host, upstream));
  } else {
    leaf = ca_.forge_cached(host);
  }
  auto tls = tls_server(std::move(client), ctx_.get(), leaf->identity());
  const auto hs = tls->handshake(deadline_in(options_.handshake_timeout));

  if (!hs.completed) {
    if (hs.alert_received) {
      decide(VerdictValue::PenProof, Evidence::HandshakeAborted, "alert " + std::to_string(hs.alert_description));
    } else if (!hs.client_hello_seen) {
      decide(VerdictValue::Untested, std::nullopt, "no ClientHello: " + hs.error);
    } else if (hs.timed_out) {
      decide(VerdictValue::PenProof, Evidence::Timeout, hs.error);
    } else if (hs.peer_closed) {
      decide(VerdictValue::PenProof, Evidence::ConnectionClosedSilent, hs.error);
    } else {
      // A failure of our own making (no shared cipher and the like).
      decide(VerdictValue::Untested, std::nullopt, hs.error);
    }
    return out;
  }

  // Some stacks finish the handshake and only then validate, so a completed
  // handshake alone proves nothing.
  std::uint8_t buf[16384];
  try {
    const auto n = tls->read_some(buf, deadline_in(options_.decision_window));
    if (n > 0) {
      out.first_bytes.assign(buf, buf + n);
      decide(VerdictValue::Vulnerable, Evidence::HandshakeCompletedWithAppData);
      out.session = std::move(tls);
      return out;
    }
    if (tls->alert_received()) {
      decide(VerdictValue::PenProof, Evidence::HandshakeAborted, "alert after handshake");
    } else {
      decide(VerdictValue::PenProof, Evidence::ConnectionClosedSilent);
    }
  } catch (const NetError& e) {
    if (e.kind() == NetError::Kind::Timeout) {
      decide(VerdictValue::PenProof, Evidence::Timeout, "no application data within the decision window");
    } else if (tls->alert_received()) {
      decide(VerdictValue::PenProof, Evidence::HandshakeAborted, "alert after handshake");
    } else {
      decide(VerdictValue::PenProof, Evidence::ConnectionClosedSilent, e.what());
    }
  }
  return out;
}

std::string VerdictRecord::to_json() const {
  nlohmann::ordered_json j;
  j["client"] = client;
  j["version"] = version;
  j["verdict"] = std::string(to_string(verdict));
  j["evidence"] = evidence ? nlohmann::ordered_json(std::string(to_string(*evidence))) : nlohmann::ordered_json();
  j["ts"] = ts;
  return j.dump();
}

std::optional<VerdictRecord> VerdictRecord::from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    VerdictRecord r;
    r.client = j.at("client").get<std::string>();
    r.version = j.at("version").get<std::string>();
    const auto v = parse_verdict_value(j.at("verdict").get<std::string>());
    if (!v) return std::nullopt;
    r.verdict = *v;
    if (!j.at("evidence").is_null()) {
      r.evidence = parse_evidence(j.at("evidence").get<std::string>());
      if (!r.evidence) return std::nullopt;
    }
    r.ts = j.at("ts").get<std::int64_t>();
    return r;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

VerdictLog::VerdictLog(std::filesystem::path path) : path_(std::move(path)) {}

void VerdictLog::append(const VerdictRecord& record) {
  std::lock_guard lock(mu_);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << record.to_json() << '\n';
  }
  records_.push_back(record);
}

std::vector<VerdictRecord> VerdictLog::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::size_t VerdictLog::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::vector<VerdictRecord> VerdictLog::load(const std::filesystem::path& path) {
  std::vector<VerdictRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (auto r = VerdictRecord::from_json(line)) out.push_back(std::move(*r));
  }
  return out;
}

VerdictRecorder::VerdictRecorder(std::shared_ptr<WhitelistStore> store, std::shared_ptr<VerdictLog> log)
    : store_(std::move(store)), log_(std::move(log)) {}

void VerdictRecorder::record(const ClientDescriptor& client, const Verdict& verdict) {
  if (verdict.value == VerdictValue::Untested) throw std::invalid_argument("Untested verdicts are not recorded");
  if (client.name.empty()) throw std::invalid_argument("client identity unknown");
  if (log_) {
    log_->append({client.name, client.version, verdict.value, verdict.evidence, unix_millis(verdict.decided_at)});
  }
  if (verdict.value != VerdictValue::PenProof || !store_) return;

  WhitelistEntry entry;
  entry.descriptor = client;
  entry.inserted_at = std::chrono::duration_cast<std::chrono::seconds>(verdict.decided_at.time_since_epoch()).count();
  // Keep a user's earlier opt-in when the same client is confirmed again.
  if (store_->lookup(client.name, client.version)) return;
  {
    std::lock_guard lock(mu_);
    pending_.push_back(std::move(entry));
  }
  retry_pending();
}

std::size_t VerdictRecorder::retry_pending() {
  std::lock_guard lock(mu_);
  std::vector<WhitelistEntry> still;
  for (auto& e : pending_) {
    try {
      store_->insert(e);
    } catch (const StoreWriteError&) {
      still.push_back(std::move(e));
    }
  }
  pending_ = std::move(still);
  return pending_.size();
}

std::size_t VerdictRecorder::pending() const {
  std::lock_guard lock(mu_);
  return pending_.size();
}

}  // namespace certwarden
