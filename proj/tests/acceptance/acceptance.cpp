// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Tolerances are fixed here, not tuned per run.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "certwarden/chain_model.hpp"
#include "certwarden/client_ident.hpp"
#include "certwarden/service.hpp"
#include "certwarden/simlab.hpp"
#include "certwarden/whitelist_store.hpp"
#include "fixtures.hpp"

using namespace certwarden;
using namespace std::chrono_literals;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

constexpr std::size_t kDetectionRuns = 20;
constexpr auto kDetectionBudget = 60s;
constexpr std::size_t kAttackTrials = 10;
constexpr std::size_t kBenchTrials = 30;
constexpr std::size_t kTamperTrials = 100;
constexpr std::size_t kChainSamples = 1000;
constexpr std::size_t kProcRows = 1000;
const std::string kCredential = "user=alice&password=correct-horse-battery-staple";

std::string text_of(const Bytes& b) { return std::string(b.begin(), b.end()); }

Outcome detection_matrix() {
  sim::Lab lab;
  const auto report = sim::run_detection_matrix(lab, sim::default_clients(), kDetectionRuns);
  std::size_t retries = 0;
  std::ostringstream d;
  for (const auto& row : report.rows) {
    const auto hits = static_cast<std::size_t>(std::count(row.verdicts.begin(), row.verdicts.end(), row.expected));
    retries += row.retries;
    d << row.client.name << " " << hits << "/" << kDetectionRuns << " " << to_string(row.expected) << "; ";
  }
  d << "retries " << retries << "; " << report.elapsed.count() << " ms";
  const bool full = std::all_of(report.rows.begin(), report.rows.end(), [](const sim::DetectionRow& r) {
    return r.verdicts.size() == kDetectionRuns && r.as_expected();
  });
  return {report.rows.size() == 3 && full && retries == 0 && report.elapsed < kDetectionBudget, d.str()};
}

Outcome attack_matrix() {
  sim::Lab lab;
  const auto report = sim::run_attack_matrix(lab, sim::all_placements(), kAttackTrials);
  std::ostringstream d;
  bool ok = report.rows.size() == 4;
  for (const auto& row : report.rows) {
    const auto hits = static_cast<std::size_t>(
        std::count(row.actions.begin(), row.actions.end(), std::optional<EnforcementAction>(row.expected)));
    ok = ok && row.actions.size() == kAttackTrials && hits == kAttackTrials && row.leaked_bytes == 0;
    d << to_string(row.placement) << " " << hits << "/" << kAttackTrials << " " << to_string(row.expected)
      << " leaked " << row.leaked_bytes << "; ";
  }
  return {ok, d.str()};
}

Outcome whitelist_semantics() {
  sim::Lab lab;
  std::ostringstream d;
  bool ok = true;
  for (const auto& client : {sim::SyntheticClient{sim::Behavior::Strict, "strict-mail", "2.3"},
                             sim::SyntheticClient{sim::Behavior::Pinned, "pinned-bank", "5.1"}}) {
    const auto first = lab.request(client);
    const auto f1 = lab.flow_for(first);
    const bool tested = f1 && f1->verdict_at_time && f1->verdict_at_time->value == VerdictValue::PenProof;
    const bool listed = lab.store().lookup(client.name, client.version).has_value();

    const auto second = lab.request(client);
    const auto f2 = lab.flow_for(second);
    const bool genuine = second.status == 200 && second.leaf_issuer == lab.intermediate_subject() &&
                         second.leaf_issuer != lab.proxy_ca_subject();
    const bool passthrough = f2 && !f2->verdict_at_time && !f2->enforcement;

    lab.store().remove(client.name, client.version);
    const auto third = lab.request(client);
    const auto f3 = lab.flow_for(third);
    const bool retested = f3 && f3->verdict_at_time && f3->verdict_at_time->value == VerdictValue::PenProof;

    ok = ok && tested && listed && genuine && passthrough && retested;
    d << client.name << ": tested=" << tested << " listed=" << listed << " second issuer=\"" << second.leaf_issuer
      << "\" passthrough=" << passthrough << " retested_after_removal=" << retested << "; ";
  }
  return {ok, d.str()};
}

Outcome attack_demo() {
  sim::Lab lab;
  lab.place_attacker(sim::Placement::UpstreamPath);
  const sim::SyntheticClient victim{sim::Behavior::Naive, "naive-victim", "1.0"};
  const sim::ClientRequest login{"POST", "/login", kCredential};

  const auto unprotected = lab.request_direct(victim, login);
  const auto stolen = text_of(lab.upstream_attacker().captured());
  const bool leaked = stolen.find(kCredential) != std::string::npos;

  lab.upstream_attacker().clear();
  lab.upstream().clear_requests();
  const auto guarded = lab.request(victim, login);
  const auto flow = lab.flow_for(guarded);
  const bool blocked = flow && flow->enforcement && flow->enforcement->action == EnforcementAction::BlockedMismatch;
  const auto captured = lab.upstream_attacker().captured().size() + lab.oracle_attacker().captured().size();

  std::ostringstream d;
  d << "without proxy: status " << unprotected.status << ", credential captured=" << leaked
    << "; with proxy: action "
    << (flow && flow->enforcement ? std::string(to_string(flow->enforcement->action)) : std::string("none"))
    << ", attacker captured " << captured << " bytes";
  return {leaked && blocked && captured == 0 && guarded.status != 200, d.str()};
}

Outcome overhead() {
  sim::Lab lab;
  sim::BenchOptions o;
  o.trials = kBenchTrials;
  const auto r = sim::run_overhead_bench(lab, o);
  const double spread = r.baseline.median_ms > 0 ? r.baseline.p95_ms / r.baseline.median_ms : 0;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "fetches new=%llu cached=%llu; baseline median %.2f ms p95 %.2f ms (p95/median %.2f); protected "
                "median %.2f ms; cold overhead_ratio %.2f%s%s",
                static_cast<unsigned long long>(r.fetches_new_host),
                static_cast<unsigned long long>(r.fetches_cached_host), r.baseline.median_ms, r.baseline.p95_ms,
                spread, r.protected_run.median_ms, r.overhead_ratio, r.valid ? "" : "; invalid: ",
                r.invalid_reason.c_str());
  return {r.valid && r.fetches_new_host == 2 && r.fetches_cached_host == 0 && spread <= 5.0, buf};
}

Outcome tamper_evidence() {
  cwtest::TempDir dir;
  std::mt19937_64 rng(20240601);

  // Whitelist store file.
  const auto key = random_bytes(kStoreKeySize);
  const auto store_path = dir / "wl.bin";
  {
    auto store = WhitelistStore::open(store_path, key);
    for (int i = 0; i < 8; ++i) {
      WhitelistEntry e;
      e.descriptor = {"client-" + std::to_string(i), "1." + std::to_string(i), "https://h.test/"};
      store->insert(e);
    }
  }
  const auto store_bytes = cwtest::read_file(store_path);
  std::size_t store_detected = 0;
  for (std::size_t i = 0; i < kTamperTrials; ++i) {
    auto copy = store_bytes;
    cwtest::flip_bit(copy, rng() % (copy.size() * 8));
    cwtest::write_file(store_path, copy);
    try {
      WhitelistStore::open(store_path, key);
    } catch (const StoreTamperedError&) {
      ++store_detected;
    }
  }

  // Pinned keystore: the proxy service must refuse to start.
  Config c;
  c.data_dir = dir.path() / "svc";
  std::filesystem::create_directories(c.data_dir);
  c.proxy_port = 0;
  c.admin_bind = "127.0.0.1:0";
  init_material(c);
  const EnvLookup no_env = [](const std::string&) { return std::nullopt; };
  const auto ks_path = c.resolve(c.keystore_path);
  const auto ks_bytes = cwtest::read_file(ks_path);
  bool clean_starts = false;
  try {
    ProxyService svc(c, {}, no_env);
    clean_starts = true;
  } catch (const std::exception&) {
  }
  std::size_t ks_aborted = 0;
  for (std::size_t i = 0; i < kTamperTrials; ++i) {
    auto copy = ks_bytes;
    cwtest::flip_bit(copy, rng() % (copy.size() * 8));
    cwtest::write_file(ks_path, copy);
    try {
      ProxyService svc(c, {}, no_env);
    } catch (const KeystoreError&) {
      ++ks_aborted;
    }
  }
  std::ostringstream d;
  d << "store " << store_detected << "/" << kTamperTrials << " detected at open; keystore " << ks_aborted << "/"
    << kTamperTrials << " aborted startup; untampered keystore starts=" << clean_starts;
  return {store_detected == kTamperTrials && ks_aborted == kTamperTrials && clean_starts, d.str()};
}

Outcome chain_properties() {
  cwtest::ChainFactory factory(20240602);
  auto& rng = factory.rng();
  std::vector<CertificateChain> chains;
  std::size_t reflexive = 0, permutation = 0, symmetric = 0, roundtrip = 0;
  for (std::size_t i = 0; i < kChainSamples; ++i) {
    const auto wire = factory.random_chain();
    const auto chain = normalize_order(parse_chain(wire));
    if (compare_chains(chain, chain).matched) ++reflexive;

    auto shuffled = wire;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto permuted = normalize_order(parse_chain(shuffled));
    if (compare_chains(chain, permuted).matched && permuted.der_list() == chain.der_list()) ++permutation;

    const auto text = serialize_chain(chain);
    const auto back = deserialize_chain(text);
    if (back.der_list() == chain.der_list() && serialize_chain(back) == text) ++roundtrip;
    chains.push_back(chain);
  }
  for (std::size_t i = 0; i < kChainSamples; ++i) {
    const auto& a = chains[i];
    const auto& b = chains[(i * 7 + 3) % kChainSamples];
    if (compare_chains(a, b) == compare_chains(b, a)) ++symmetric;
  }
  std::ostringstream d;
  d << "reflexive " << reflexive << "/" << kChainSamples << ", symmetric " << symmetric << "/" << kChainSamples
    << ", permutation-invariant " << permutation << "/" << kChainSamples << ", json round-trip " << roundtrip << "/"
    << kChainSamples;
  const bool ok = reflexive == kChainSamples && symmetric == kChainSamples && permutation == kChainSamples &&
                  roundtrip == kChainSamples;
  return {ok, d.str()};
}

Outcome socket_attribution() {
  auto listener = Listener::bind("127.0.0.1", 0);
  cwtest::HelperProcess helper("cw-attrib", listener.endpoint());
  auto accepted = listener.accept(deadline_in(5s));
  ProcfsResolver resolver;
  const auto owner = accepted.valid() ? resolver.resolve_port(accepted.peer_port(), listener.port()) : std::nullopt;
  const bool named = owner && owner->process_name == "cw-attrib" && owner->pid == helper.pid();

  std::mt19937_64 rng(20240603);
  std::string text = "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n";
  std::vector<SocketRow> rows;
  for (std::size_t i = 0; i < kProcRows; ++i) {
    rows.push_back(cwtest::random_row(rng));
    text += format_proc_tcp_row(i, rows.back()) + "\n";
  }
  const auto table = parse_proc_tcp(text);
  std::size_t errors = table.rejected;
  for (std::size_t i = 0; i < kProcRows; ++i) {
    if (i >= table.rows.size()) {
      ++errors;
      continue;
    }
    const auto& got = table.rows[i];
    if (got.local_port != rows[i].local_port || got.uid != rows[i].uid || got.inode != rows[i].inode) ++errors;
  }
  std::ostringstream d;
  d << "helper resolved as \"" << (owner ? owner->process_name : std::string("none")) << "\" pid "
    << (owner ? owner->pid : 0) << " (expected " << helper.pid() << "); " << kProcRows << " rows, " << errors
    << " errors";
  return {named && errors == 0, d.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"detection_matrix", detection_matrix},     {"attack_matrix", attack_matrix},
      {"whitelist_semantics", whitelist_semantics}, {"end_to_end_attack_demo", attack_demo},
      {"overhead", overhead},                     {"tamper_evidence", tamper_evidence},
      {"chain_model_properties", chain_properties}, {"socket_attribution", socket_attribution},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
