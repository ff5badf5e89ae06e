#include <gtest/gtest.h>

#include <algorithm>

#include "certwarden/chain_model.hpp"
#include "fixtures.hpp"

using namespace certwarden;
using Reason = ChainComparison::Reason;

namespace {

struct Hierarchy {
  CertAuthority root;
  CertAuthority intermediate;
  Bytes root_der;
  Bytes int_der;

  explicit Hierarchy(const std::string& name) : root(make_root(name)), intermediate(root.issue_subordinate(name + " Int", 90)) {
    root_der = x509_to_der(root.certificate());
    int_der = x509_to_der(intermediate.certificate());
  }

  Bytes leaf(const std::string& host) const { return x509_to_der(intermediate.forge_leaf(host).certificate.get()); }

  static CertAuthority make_root(const std::string& name) {
    CaOptions o;
    o.common_name = name;
    return CertAuthority::generate(o);
  }
};

std::size_t find_bytes(const Bytes& hay, std::string_view needle) {
  const auto it = std::search(hay.begin(), hay.end(), needle.begin(), needle.end());
  return it == hay.end() ? std::string::npos : static_cast<std::size_t>(it - hay.begin());
}

}  // namespace

TEST(ParseChain, SingleAndThreeEntries) {
  const Hierarchy h("Parse Root");
  const auto leaf = h.leaf("p.test");
  const auto one = parse_chain({leaf});
  EXPECT_EQ(one.size(), 1u);
  EXPECT_EQ(one.leaf().raw_der, leaf);
  EXPECT_FALSE(one.leaf().signature.empty());
  EXPECT_FALSE(one.leaf().public_key_info.empty());

  const auto three = parse_chain({leaf, h.int_der, h.root_der});
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(three[1].issuer_der, three[2].subject_der);
  EXPECT_EQ(three[0].issuer_der, three[1].subject_der);
  EXPECT_TRUE(three[2].self_issued());
}

TEST(ParseChain, FailClosed) {
  const Hierarchy h("Closed Root");
  const auto leaf = h.leaf("c.test");
  EXPECT_THROW(parse_chain({}), ChainParseError);
  EXPECT_THROW(parse_chain({Bytes{}}), ChainParseError);
  EXPECT_THROW(parse_chain({Bytes(leaf.begin(), leaf.end() - 1)}), ChainParseError);
  auto trailing = leaf;
  trailing.push_back(0);
  EXPECT_THROW(parse_chain({trailing}), ChainParseError);
  // One bad element rejects the chain even when the others are fine.
  EXPECT_THROW(parse_chain({leaf, Bytes{0x30, 0x03, 0x01}}), ChainParseError);
}

TEST(NormalizeOrder, ReordersAndDedups) {
  const Hierarchy h("Order Root");
  const auto leaf = h.leaf("o.test");
  const auto out = normalize_order(parse_chain({h.int_der, leaf}));
  EXPECT_FALSE(out.unlinkable());
  EXPECT_EQ(out.der_list(), (std::vector<Bytes>{leaf, h.int_der}));

  const auto dup = normalize_order(parse_chain({h.root_der, leaf, h.int_der, leaf}));
  EXPECT_EQ(dup.der_list(), (std::vector<Bytes>{leaf, h.int_der, h.root_der}));
}

TEST(NormalizeOrder, UnrelatedLeavesAreUnlinkable) {
  const Hierarchy a("Left Root");
  const Hierarchy b("Right Root");
  const auto out = normalize_order(parse_chain({a.leaf("x.test"), b.leaf("y.test")}));
  EXPECT_TRUE(out.unlinkable());
  const auto cmp = compare_chains(out, out);
  EXPECT_FALSE(cmp.matched);
  EXPECT_EQ(cmp.reason, Reason::UnlinkableChain);
}

TEST(CompareChains, GenuineVersusForged) {
  const Hierarchy h("Genuine Root");
  const auto genuine = normalize_order(parse_chain({h.leaf("shop.test"), h.int_der}));
  const auto rogue = CertAuthority::generate({});
  const auto forged_leaf = x509_to_der(rogue.forge_leaf("shop.test").certificate.get());

  const auto self = compare_chains(genuine, genuine);
  EXPECT_TRUE(self.matched);
  EXPECT_FALSE(self.reason);
  EXPECT_TRUE(self.raw_der_equal);

  // Same length as the genuine chain, so the leaf signature decides.
  const auto forged = normalize_order(parse_chain({forged_leaf, x509_to_der(rogue.certificate())}));
  const auto cmp = compare_chains(genuine, forged);
  EXPECT_FALSE(cmp.matched);
  EXPECT_EQ(cmp.reason, Reason::SignatureMismatch);
  EXPECT_EQ(cmp.first_divergence, 0u);
}

TEST(CompareChains, LengthMismatch) {
  const Hierarchy h("Length Root");
  const auto leaf = h.leaf("l.test");
  const auto two = normalize_order(parse_chain({leaf, h.int_der}));
  const auto three = normalize_order(parse_chain({leaf, h.int_der, h.root_der}));
  const auto cmp = compare_chains(two, three);
  EXPECT_FALSE(cmp.matched);
  EXPECT_EQ(cmp.reason, Reason::LengthMismatch);
  EXPECT_EQ(cmp.first_divergence, 2u);
}

TEST(CompareChains, DecidedBySignatureBytesOnly) {
  const Hierarchy h("Mutation Root");
  const auto leaf = h.leaf("mutate.test");
  const auto base = parse_chain({leaf});

  // The DER ends inside the signature BIT STRING.
  auto sig_mut = leaf;
  sig_mut.back() ^= 0x01;
  const auto sig_cmp = compare_chains(base, parse_chain({sig_mut}));
  EXPECT_FALSE(sig_cmp.matched);
  EXPECT_EQ(sig_cmp.reason, Reason::SignatureMismatch);

  // A byte inside the subject CN keeps the signature intact.
  auto tbs_mut = leaf;
  const auto at = find_bytes(tbs_mut, "mutate.test");
  ASSERT_NE(at, std::string::npos);
  tbs_mut[at] = 'n';
  const auto tbs_cmp = compare_chains(base, parse_chain({tbs_mut}));
  EXPECT_TRUE(tbs_cmp.matched);
  EXPECT_FALSE(tbs_cmp.raw_der_equal);
}

TEST(SerializeChain, FormatAndRoundTrip) {
  const Hierarchy h("Json Root");
  const auto chain = parse_chain({h.leaf("j.test"), h.int_der});
  const auto text = serialize_chain(chain);
  EXPECT_EQ(text, "{\"chain\":[\"" + base64_encode(chain[0].raw_der) + "\",\"" + base64_encode(chain[1].raw_der) +
                      "\"]}");
  EXPECT_EQ(deserialize_chain(text).der_list(), chain.der_list());
}

TEST(SerializeChain, RejectsMalformed) {
  for (const char* bad : {"", "[]", "{}", "{\"chain\":[]}", "{\"chain\":\"x\"}", "{\"chain\":[1]}",
                          "{\"chain\":[\"!!\"]}", "{\"chain\":[\"AAAA\"]}"}) {
    EXPECT_THROW(deserialize_chain(bad), ChainParseError) << bad;
  }
}

TEST(ChainProperties, RandomChains) {
  cwtest::ChainFactory factory(7);
  auto& rng = factory.rng();
  std::vector<CertificateChain> normalized;
  for (int i = 0; i < 1000; ++i) {
    const auto wire = factory.random_chain();
    const auto chain = normalize_order(parse_chain(wire));
    ASSERT_FALSE(chain.unlinkable());
    EXPECT_EQ(chain.der_list(), wire);

    auto shuffled = wire;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    shuffled.push_back(shuffled[rng() % shuffled.size()]);
    const auto again = normalize_order(parse_chain(shuffled));
    EXPECT_EQ(again.der_list(), wire);
    EXPECT_EQ(normalize_order(again).der_list(), again.der_list());

    EXPECT_TRUE(compare_chains(chain, again).matched);
    EXPECT_EQ(deserialize_chain(serialize_chain(chain)).der_list(), wire);
    normalized.push_back(chain);
  }
  // Distinct leaves never match each other.
  for (std::size_t i = 1; i < normalized.size(); ++i) {
    const auto cmp = compare_chains(normalized[i - 1], normalized[i]);
    EXPECT_FALSE(cmp.matched);
    EXPECT_EQ(cmp.reason, compare_chains(normalized[i], normalized[i - 1]).reason);
  }
}
