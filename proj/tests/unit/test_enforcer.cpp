#include <gtest/gtest.h>

#include "certwarden/enforcer.hpp"
#include "certwarden/simlab.hpp"

using namespace certwarden;
using namespace std::chrono_literals;
using Action = EnforcementAction;

namespace {

template <typename T>
std::shared_ptr<const Dialer> borrow(T& dialer) {
  return std::shared_ptr<const Dialer>(std::shared_ptr<void>{}, &dialer);
}

/// An oracle of our own on the lab backbone, reachable from the device at
/// oracle2.test:8443, plus a client pinned to it.
struct SecondOracle {
  CertAuthority ca = CertAuthority::generate({});
  ForgedLeaf leaf = ca.forge_leaf("oracle2.test");
  std::unique_ptr<OracleServer> server;
  Endpoint logical{"oracle2.test", 8443};

  explicit SecondOracle(sim::Lab& lab) {
    OracleServerOptions o;
    o.rate_limit_per_minute = 0;
    o.dialer = borrow(lab.backbone());
    server = std::make_unique<OracleServer>(leaf.identity(), o);
    server->start();
    lab.device_net().route(logical, server->endpoint());
  }

  std::shared_ptr<OracleClient> client(sim::Lab& lab, X509* pinned) const {
    const Bytes key = random_bytes(32);
    return std::make_shared<OracleClient>(logical, verify_keystore(serialize_keystore(pinned, key), key),
                                          borrow(lab.device_net()), 3s);
  }
};

}  // namespace

class EnforcerTest : public ::testing::Test {
 protected:
  sim::Lab lab;
};

TEST_F(EnforcerTest, GenuinePathForwardsAndCaches) {
  auto& e = lab.enforcer();
  e.reset_counters();
  auto s = e.enforce(lab.upstream_url());
  ASSERT_TRUE(s.result.forwarded()) << s.result.diagnostic;
  ASSERT_TRUE(s.upstream);
  EXPECT_TRUE(s.result.oracle_pin_ok);
  EXPECT_TRUE(s.result.upstream_trusted);
  EXPECT_TRUE(s.result.comparison->matched);
  EXPECT_FALSE(s.result.from_cache);
  EXPECT_EQ(e.direct_fetches(), 1u);
  EXPECT_EQ(e.oracle_fetches(), 1u);

  // Within the TTL neither fetch repeats.
  for (int i = 0; i < 3; ++i) {
    auto again = e.enforce(lab.upstream_url());
    EXPECT_TRUE(again.result.forwarded());
    EXPECT_TRUE(again.result.from_cache);
  }
  EXPECT_EQ(e.direct_fetches(), 1u);
  EXPECT_EQ(e.oracle_fetches(), 1u);

  e.clear_cache();
  e.enforce(lab.upstream_url());
  EXPECT_EQ(e.oracle_fetches(), 2u);

  e.set_cache_enabled(false);
  e.enforce(lab.upstream_url());
  e.enforce(lab.upstream_url());
  EXPECT_EQ(e.oracle_fetches(), 4u);
}

TEST_F(EnforcerTest, CachedSessionStillComparesItsOwnChain) {
  auto& e = lab.enforcer();
  ASSERT_TRUE(e.enforce(lab.upstream_url()).result.forwarded());
  // Attacker appears after the host was cached.
  lab.place_attacker(sim::Placement::UpstreamPath);
  const auto s = e.enforce(lab.upstream_url());
  EXPECT_EQ(s.result.action, Action::BlockedMismatch);
  EXPECT_FALSE(s.upstream);
  EXPECT_TRUE(e.poisoned(lab.upstream_logical()));
}

TEST_F(EnforcerTest, UpstreamAttackerIsMismatch) {
  lab.place_attacker(sim::Placement::UpstreamPath);
  auto& e = lab.enforcer();
  const auto s = e.enforce(lab.upstream_url());
  EXPECT_EQ(s.result.action, Action::BlockedMismatch);
  EXPECT_EQ(s.result.comparison->reason, ChainComparison::Reason::LengthMismatch);
  EXPECT_EQ(s.result.comparison->first_divergence, 0u);
  EXPECT_TRUE(s.result.oracle_pin_ok);
  EXPECT_TRUE(lab.upstream_attacker().captured().empty()) << "no application data may reach the attacker";

  // A host that ever mismatched is never cached again.
  lab.place_attacker(sim::Placement::None);
  e.reset_counters();
  EXPECT_TRUE(e.enforce(lab.upstream_url()).result.forwarded());
  EXPECT_TRUE(e.enforce(lab.upstream_url()).result.forwarded());
  EXPECT_EQ(e.oracle_fetches(), 2u);
}

TEST_F(EnforcerTest, OracleAttackerIsPinFailure) {
  for (auto p : {sim::Placement::OraclePath, sim::Placement::Both}) {
    lab.enforcer().clear_cache();
    lab.place_attacker(p);
    const auto r = lab.enforcer().check(lab.upstream_url());
    EXPECT_EQ(r.action, Action::BlockedPinFailure) << to_string(p);
    EXPECT_FALSE(r.oracle_pin_ok);
  }
}

TEST_F(EnforcerTest, OracleDownBlocks) {
  lab.oracle().stop();
  const auto r = lab.enforcer().check(lab.upstream_url());
  EXPECT_EQ(r.action, Action::BlockedOracleUnreachable);
}

TEST_F(EnforcerTest, UnreachableUpstreamBlocks) {
  std::uint16_t closed = 0;
  {
    auto l = Listener::bind("127.0.0.1", 0);
    closed = l.port();
  }
  HttpsUrl url{"127.0.0.1", closed, "/"};
  const auto s = lab.enforcer().enforce(url);
  EXPECT_EQ(s.result.action, Action::BlockedUpstreamUnreachable);
  EXPECT_FALSE(s.upstream);
}

TEST_F(EnforcerTest, AgreeingButUntrustedUpstreamBlocks) {
  SecondOracle oracle(lab);
  EnforcerOptions o;
  o.upstream_trust = TrustStore();  // trusts nothing
  Enforcer e(borrow(lab.device_net()), oracle.client(lab, oracle.leaf.certificate.get()), o);
  const auto s = e.enforce(lab.upstream_url());
  EXPECT_EQ(s.result.action, Action::BlockedUntrustedUpstream);
  EXPECT_TRUE(s.result.comparison->matched);
  EXPECT_FALSE(s.upstream);
}

TEST_F(EnforcerTest, CacheExpiresAfterTtl) {
  SecondOracle oracle(lab);
  auto now = std::make_shared<SteadyClock::time_point>(SteadyClock::now());
  EnforcerOptions o;
  o.upstream_trust = lab.public_trust();
  o.cache_ttl = 10min;
  o.clock = [now] { return *now; };
  Enforcer e(borrow(lab.device_net()), oracle.client(lab, oracle.leaf.certificate.get()), o);
  e.check(lab.upstream_url());
  *now += 9min;
  EXPECT_TRUE(e.check(lab.upstream_url()).from_cache);
  *now += 2min;
  EXPECT_FALSE(e.check(lab.upstream_url()).from_cache);
  EXPECT_EQ(e.oracle_fetches(), 2u);
}

TEST(OracleClient, PinMismatchAndUnreachable) {
  sim::Lab lab;
  SecondOracle oracle(lab);
  const auto stranger = CertAuthority::generate({}).forge_leaf("oracle2.test");
  const auto wrong = oracle.client(lab, stranger.certificate.get());
  auto r = wrong->fetch(lab.upstream_url());
  EXPECT_EQ(r.failure, OracleClient::Failure::PinMismatch);
  EXPECT_FALSE(r.chain);

  const auto right = oracle.client(lab, oracle.leaf.certificate.get());
  r = right->fetch(lab.upstream_url());
  ASSERT_TRUE(r.chain) << r.detail;
  EXPECT_EQ(r.chain->leaf().raw_der, lab.upstream_leaf_der());

  oracle.server->stop();
  r = right->fetch(lab.upstream_url());
  EXPECT_EQ(r.failure, OracleClient::Failure::Unreachable);
}

TEST(EnforcementAction, Names) {
  EXPECT_EQ(to_string(Action::Forwarded), "Forwarded");
  EXPECT_EQ(to_string(Action::BlockedMismatch), "BlockedMismatch");
  EXPECT_EQ(to_string(Action::BlockedOracleUnreachable), "BlockedOracleUnreachable");
}
