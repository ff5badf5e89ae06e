#include <benchmark/benchmark.h>

#include "certwarden/cert_authority.hpp"
#include "certwarden/chain_model.hpp"
#include "certwarden/simlab.hpp"

using namespace certwarden;

namespace {

struct Hierarchy {
  CertAuthority root = CertAuthority::generate({});
  CertAuthority mid = root.issue_subordinate("bench intermediate", 365);
  std::vector<Bytes> wire;

  Hierarchy() {
    const auto leaf = mid.forge_leaf("bench.test");
    wire = {x509_to_der(leaf.certificate.get()), x509_to_der(mid.certificate()), x509_to_der(root.certificate())};
  }
};

const Hierarchy& hierarchy() {
  static const Hierarchy h;
  return h;
}

void BM_ParseNormalizeChain(benchmark::State& state) {
  const auto& wire = hierarchy().wire;
  for (auto _ : state) benchmark::DoNotOptimize(normalize_order(parse_chain(wire)));
}
BENCHMARK(BM_ParseNormalizeChain);

void BM_CompareChains(benchmark::State& state) {
  const auto a = normalize_order(parse_chain(hierarchy().wire));
  const auto b = normalize_order(parse_chain(hierarchy().wire));
  for (auto _ : state) benchmark::DoNotOptimize(compare_chains(a, b));
}
BENCHMARK(BM_CompareChains);

void BM_SerializeRoundTrip(benchmark::State& state) {
  const auto chain = normalize_order(parse_chain(hierarchy().wire));
  for (auto _ : state) benchmark::DoNotOptimize(deserialize_chain(serialize_chain(chain)));
}
BENCHMARK(BM_SerializeRoundTrip);

void BM_ForgeLeaf(benchmark::State& state) {
  CaOptions o;
  o.profile = state.range(0) ? KeyProfile::Rsa2048 : KeyProfile::EcP256;
  const auto ca = CertAuthority::generate(o);
  for (auto _ : state) benchmark::DoNotOptimize(ca.forge_leaf("shop.test"));
  state.SetLabel(std::string(to_string(o.profile)));
}
BENCHMARK(BM_ForgeLeaf)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_ForgeCached(benchmark::State& state) {
  const auto ca = CertAuthority::generate({});
  ca.forge_cached("shop.test");
  for (auto _ : state) benchmark::DoNotOptimize(ca.forge_cached("shop.test"));
}
BENCHMARK(BM_ForgeCached);

// Login-style POST through the lab: 0 goes straight to the origin, 1 goes
// through the proxy as a whitelisted client with enforcement on.
void BM_LoginRequest(benchmark::State& state) {
  sim::Lab lab;
  const sim::SyntheticClient client{sim::Behavior::Strict, "bench-mail", "1.0"};
  const sim::ClientRequest login{"POST", "/login", "user=a&password=b"};
  if (state.range(0)) {
    // The verdict is recorded once the flow closes.
    lab.flow_for(lab.request(client, login));
    lab.store().set_enforce_anyway(client.name, client.version, true);
  }
  for (auto _ : state) {
    const auto r = state.range(0) ? lab.request(client, login) : lab.request_direct(client, login);
    if (r.status != 200) {
      state.SkipWithError(("request failed: " + r.error).c_str());
      break;
    }
  }
  state.SetLabel(state.range(0) ? "proxied" : "direct");
}
BENCHMARK(BM_LoginRequest)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
