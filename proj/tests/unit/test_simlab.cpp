#include <gtest/gtest.h>

#include "json.hpp"

#include "certwarden/simlab.hpp"

using namespace certwarden;
using namespace certwarden::sim;

TEST(SimNames, BehaviorsAndPlacements) {
  for (auto b : {Behavior::Naive, Behavior::Strict, Behavior::Pinned}) EXPECT_EQ(parse_behavior(to_string(b)), b);
  EXPECT_EQ(expected_verdict(Behavior::Naive), VerdictValue::Vulnerable);
  EXPECT_EQ(expected_verdict(Behavior::Strict), VerdictValue::PenProof);
  EXPECT_EQ(expected_verdict(Behavior::Pinned), VerdictValue::PenProof);
  EXPECT_EQ(all_placements().size(), 4u);
  for (auto p : all_placements()) EXPECT_EQ(parse_placement(to_string(p)), p);
  EXPECT_EQ(expected_action(Placement::None), EnforcementAction::Forwarded);
  EXPECT_EQ(expected_action(Placement::UpstreamPath), EnforcementAction::BlockedMismatch);
  EXPECT_EQ(expected_action(Placement::OraclePath), EnforcementAction::BlockedPinFailure);
  EXPECT_EQ(expected_action(Placement::Both), EnforcementAction::BlockedPinFailure);
  EXPECT_EQ(default_clients().size(), 3u);
}

TEST(SimStats, MedianAndNearestRankP95) {
  std::vector<double> s;
  for (int i = 1; i <= 20; ++i) s.push_back(i);
  const auto st = DurationStats::of(s);
  EXPECT_EQ(st.n, 20u);
  EXPECT_DOUBLE_EQ(st.median_ms, 10.5);
  EXPECT_DOUBLE_EQ(st.p95_ms, 19);
  EXPECT_DOUBLE_EQ(st.min_ms, 1);
  EXPECT_DOUBLE_EQ(st.max_ms, 20);
  EXPECT_DOUBLE_EQ(DurationStats::of({5}).p95_ms, 5);
  EXPECT_EQ(DurationStats::of({}).n, 0u);
}

TEST(SimLab, DirectNaiveVictimLeaksToAttacker) {
  Lab lab;
  lab.place_attacker(Placement::UpstreamPath);
  const auto res = lab.request_direct({Behavior::Naive, "naive-victim", "1.0"}, {"POST", "/login", "password=x"});
  EXPECT_EQ(res.status, 200);
  const auto captured = lab.upstream_attacker().captured();
  EXPECT_NE(std::string(captured.begin(), captured.end()).find("password=x"), std::string::npos);
  // And a strict client refuses the attacker outright.
  lab.upstream_attacker().clear();
  const auto strict = lab.request_direct({Behavior::Strict, "strict-mail", "2.3"}, {"POST", "/login", "password=x"});
  EXPECT_FALSE(strict.handshake_ok);
  EXPECT_TRUE(lab.upstream_attacker().captured().empty());
}

TEST(SimLab, SmallDetectionMatrix) {
  Lab lab;
  const auto report = run_detection_matrix(lab, default_clients(), 2);
  EXPECT_TRUE(report.passed()) << report.to_table();
  ASSERT_EQ(report.rows.size(), 3u);
  for (const auto& row : report.rows) EXPECT_EQ(row.verdicts.size(), 2u);
  const auto j = nlohmann::json::parse(report.to_json());
  EXPECT_TRUE(j.contains("rows"));
}

TEST(SimLab, SmallAttackMatrix) {
  Lab lab;
  const auto report = run_attack_matrix(lab, all_placements(), 1);
  EXPECT_TRUE(report.passed()) << report.to_table();
  for (const auto& row : report.rows) EXPECT_EQ(row.leaked_bytes, 0u) << to_string(row.placement);
}

TEST(SimLab, ShortBenchIsMarkedInvalid) {
  Lab lab;
  BenchOptions o;
  o.trials = 3;
  o.requests_per_trial = 1;
  const auto report = run_overhead_bench(lab, o);
  EXPECT_FALSE(report.valid);
  EXPECT_NE(report.invalid_reason.find("30"), std::string::npos) << report.invalid_reason;
  EXPECT_EQ(report.fetches_new_host, 2u);
  EXPECT_EQ(report.fetches_cached_host, 0u);
  EXPECT_EQ(report.failed_requests, 0u);
}
