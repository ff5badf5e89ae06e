#include <gtest/gtest.h>

#include <fstream>
#include <future>

#include "certwarden/pentester.hpp"
#include "fixtures.hpp"

using namespace certwarden;
using namespace std::chrono_literals;

namespace {

enum class Peer { Naive, Strict, Silent, Hangup };

/// Runs the pentester against one in-process client of the given kind.
PentestOutcome probe(Peer kind, std::chrono::milliseconds window = 2s) {
  auto [client, server] = cwtest::loopback_pair();
  PentesterOptions o;
  o.decision_window = window;
  o.handshake_timeout = 5s;
  Pentester pentester(CertAuthority::generate({}), o);

  auto peer = std::async(std::launch::async, [kind, sock = std::move(client)]() mutable {
    if (kind == Peer::Hangup) {
      sock.close();
      return;
    }
    const TrustStore unrelated;
    auto ctx = make_client_ctx(kind == Peer::Strict ? &unrelated : nullptr);
    auto tls = tls_client(std::move(sock), ctx.get(), "shop.test");
    const auto hs = tls->handshake(deadline_in(5s));
    if (!hs.completed) return;
    if (kind == Peer::Naive) tls->write_all("GET / HTTP/1.1\r\nHost: shop.test\r\n\r\n", deadline_in(5s));
    // Hold the session open until the pentester has decided.
    try {
      tls->read_to_end(deadline_in(4s));
    } catch (const NetError&) {
    }
  });
  auto outcome = pentester.pentest(std::move(server), "shop.test");
  outcome.session.reset();
  peer.get();
  return outcome;
}

}  // namespace

TEST(Pentester, NaiveClientIsVulnerable) {
  const auto out = probe(Peer::Naive);
  EXPECT_EQ(out.verdict.value, VerdictValue::Vulnerable);
  EXPECT_EQ(out.verdict.evidence, Evidence::HandshakeCompletedWithAppData);
  EXPECT_EQ(std::string(out.first_bytes.begin(), out.first_bytes.end()).rfind("GET / HTTP/1.1", 0), 0u);
}

TEST(Pentester, KeepsSessionForVulnerableOnly) {
  auto [client, server] = cwtest::loopback_pair();
  Pentester pentester(CertAuthority::generate({}));
  auto peer = std::async(std::launch::async, [sock = std::move(client)]() mutable {
    auto ctx = make_client_ctx();
    auto tls = tls_client(std::move(sock), ctx.get(), "shop.test");
    tls->handshake_or_throw(deadline_in(5s));
    tls->write_all("x", deadline_in(5s));
    return tls->read_to_end(deadline_in(5s));
  });
  auto out = pentester.pentest(std::move(server), "shop.test");
  ASSERT_TRUE(out.session);
  // The same session keeps working for the rest of the flow.
  out.session->write_all("reply", deadline_in(5s));
  out.session->shutdown_write();
  EXPECT_EQ(peer.get(), "reply");
}

TEST(Pentester, StrictClientAbortsHandshake) {
  const auto out = probe(Peer::Strict);
  EXPECT_EQ(out.verdict.value, VerdictValue::PenProof);
  EXPECT_EQ(out.verdict.evidence, Evidence::HandshakeAborted);
  EXPECT_TRUE(out.first_bytes.empty());
}

TEST(Pentester, SilentClientTimesOut) {
  const auto started = SteadyClock::now();
  const auto out = probe(Peer::Silent, 300ms);
  EXPECT_EQ(out.verdict.value, VerdictValue::PenProof);
  EXPECT_EQ(out.verdict.evidence, Evidence::Timeout);
  EXPECT_GE(SteadyClock::now() - started, 300ms);
}

TEST(Pentester, HangupBeforeHelloIsUntested) {
  const auto out = probe(Peer::Hangup);
  EXPECT_EQ(out.verdict.value, VerdictValue::Untested);
  EXPECT_FALSE(out.verdict.evidence);
}

TEST(VerdictNames, RoundTrip) {
  for (auto v : {VerdictValue::Vulnerable, VerdictValue::PenProof, VerdictValue::Untested}) {
    EXPECT_EQ(parse_verdict_value(to_string(v)), v);
  }
  for (auto e : {Evidence::HandshakeCompletedWithAppData, Evidence::HandshakeAborted, Evidence::ConnectionClosedSilent,
                 Evidence::Timeout}) {
    EXPECT_EQ(parse_evidence(to_string(e)), e);
  }
  EXPECT_FALSE(parse_verdict_value("safe"));
}

TEST(VerdictRecord, JsonRoundTrip) {
  VerdictRecord r{"strict-mail", "2.3", VerdictValue::PenProof, Evidence::HandshakeAborted, 1700000000123};
  const auto back = VerdictRecord::from_json(r.to_json());
  ASSERT_TRUE(back);
  EXPECT_EQ(back->client, r.client);
  EXPECT_EQ(back->version, r.version);
  EXPECT_EQ(back->verdict, r.verdict);
  EXPECT_EQ(back->evidence, r.evidence);
  EXPECT_EQ(back->ts, r.ts);
  EXPECT_FALSE(VerdictRecord::from_json("{"));
  EXPECT_FALSE(VerdictRecord::from_json("{\"client\":\"a\"}"));
}

TEST(VerdictRecorder, PenProofGoesToWhitelist) {
  auto store = WhitelistStore::in_memory();
  auto log = std::make_shared<VerdictLog>();
  VerdictRecorder rec(store, log);
  Verdict proof{VerdictValue::PenProof, Evidence::HandshakeAborted, std::chrono::system_clock::now(), ""};
  Verdict vuln{VerdictValue::Vulnerable, Evidence::HandshakeCompletedWithAppData, std::chrono::system_clock::now(), ""};
  rec.record({"strict-mail", "2.3", "https://shop.test/"}, proof);
  rec.record({"naive-shop", "1.0", "https://shop.test/"}, vuln);
  EXPECT_TRUE(store->lookup("strict-mail", "2.3"));
  EXPECT_EQ(store->lookup("strict-mail", "2.3")->descriptor.first_url, "https://shop.test/");
  EXPECT_FALSE(store->lookup("naive-shop", "1.0"));
  EXPECT_EQ(log->size(), 2u);
  EXPECT_EQ(rec.pending(), 0u);

  EXPECT_THROW(rec.record({"x", "1", ""}, Verdict{}), std::invalid_argument);
  EXPECT_THROW(rec.record({"", "1", ""}, proof), std::invalid_argument);
  EXPECT_EQ(log->size(), 2u);
}

TEST(VerdictRecorder, FailedStoreWriteStaysPending) {
  cwtest::TempDir dir;
  const auto path = dir / "sub" / "wl.bin";
  auto store = WhitelistStore::open(path, random_bytes(kStoreKeySize));
  VerdictRecorder rec(store, std::make_shared<VerdictLog>());
  Verdict proof{VerdictValue::PenProof, Evidence::Timeout, std::chrono::system_clock::now(), ""};
  // The parent directory does not exist yet, so the write fails.
  try {
    rec.record({"late", "1", ""}, proof);
  } catch (const StoreWriteError&) {
  }
  EXPECT_EQ(rec.pending(), 1u);
  EXPECT_FALSE(store->lookup("late", "1"));
  std::filesystem::create_directories(path.parent_path());
  EXPECT_EQ(rec.retry_pending(), 0u);
  EXPECT_EQ(rec.pending(), 0u);
  EXPECT_TRUE(store->lookup("late", "1"));
}

TEST(VerdictLog, PersistsJsonLines) {
  cwtest::TempDir dir;
  {
    VerdictLog log(dir / "verdicts.jsonl");
    log.append({"a", "1", VerdictValue::Vulnerable, Evidence::HandshakeCompletedWithAppData, 1});
    log.append({"b", "2", VerdictValue::PenProof, Evidence::Timeout, 2});
  }
  std::ofstream(dir / "verdicts.jsonl", std::ios::app) << "not json\n";
  const auto records = VerdictLog::load(dir / "verdicts.jsonl");
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[1].client, "b");
  EXPECT_EQ(records[1].evidence, Evidence::Timeout);
}
