#include <gtest/gtest.h>

#include <sys/stat.h>

#include "certwarden/service.hpp"
#include "fixtures.hpp"

using namespace certwarden;

namespace {

Config config_in(const cwtest::TempDir& dir) {
  Config c;
  c.data_dir = dir.path();
  c.proxy_port = 0;
  c.admin_bind = "127.0.0.1:0";
  c.oracle_bind = "127.0.0.1:0";
  return c;
}

EnvLookup no_env() {
  return [](const std::string&) { return std::nullopt; };
}

}  // namespace

TEST(Service, InitMaterialWritesEverythingOnce) {
  cwtest::TempDir dir;
  const auto c = config_in(dir);
  const auto written = init_material(c);
  EXPECT_EQ(written.size(), 7u);
  for (const auto& p : written) EXPECT_TRUE(std::filesystem::exists(p)) << p;

  struct stat st{};
  ASSERT_EQ(::stat(c.resolve(c.ca_key).c_str(), &st), 0);
  EXPECT_EQ(st.st_mode & 0777, 0600u);

  EXPECT_THROW(init_material(c), ConfigError);
  EXPECT_NO_THROW(init_material(c, true));

  const auto ca = load_ca(c);
  const auto oracle = load_oracle_identity(c);
  EXPECT_EQ(X509_verify(oracle.certificate.get(), X509_get0_pubkey(ca.certificate())), 1);
  const auto pin = load_keystore(c, no_env());
  EXPECT_EQ(pin.oracle_der, x509_to_der(oracle.certificate.get()));
}

TEST(Service, KeyFromEnvironmentWins) {
  cwtest::TempDir dir;
  write_text_file(dir / "k", std::string(64, 'a'));
  EXPECT_EQ(load_key(dir / "k", kStoreKeyEnv, no_env()), Bytes(32, 0xaa));
  const auto env = [](const std::string& n) -> std::optional<std::string> {
    if (n == kStoreKeyEnv) return std::string(64, 'b');
    return std::nullopt;
  };
  EXPECT_EQ(load_key(dir / "k", kStoreKeyEnv, env), Bytes(32, 0xbb));
  EXPECT_THROW(load_key(dir / "missing", kStoreKeyEnv, no_env()), ConfigError);
  write_text_file(dir / "short", "abcd");
  EXPECT_THROW(load_key(dir / "short", kStoreKeyEnv, no_env()), ConfigError);
}

TEST(Service, StartsAndStops) {
  cwtest::TempDir dir;
  const auto c = config_in(dir);
  init_material(c);
  ProxyService svc(c, {}, no_env());
  svc.start();
  EXPECT_NE(svc.proxy().port(), 0);
  EXPECT_NE(svc.admin().port(), 0);
  EXPECT_EQ(svc.policy()->get().mode, c.mode);
  svc.stop();
}

TEST(Service, TamperedKeystoreRefusesToStart) {
  cwtest::TempDir dir;
  const auto c = config_in(dir);
  init_material(c);
  auto bytes = cwtest::read_file(c.resolve(c.keystore_path));
  cwtest::flip_bit(bytes, 100);
  cwtest::write_file(c.resolve(c.keystore_path), bytes);
  EXPECT_THROW(load_keystore(c, no_env()), KeystoreError);
  EXPECT_THROW(ProxyService(c, {}, no_env()), KeystoreError);
}

TEST(Service, TamperedStoreRefusesToStart) {
  cwtest::TempDir dir;
  const auto c = config_in(dir);
  init_material(c);
  {
    ProxyService svc(c, {}, no_env());
    WhitelistEntry e;
    e.descriptor = {"strict-mail", "2.3", ""};
    svc.store()->insert(e);
  }
  auto bytes = cwtest::read_file(c.resolve(c.store_path));
  cwtest::flip_bit(bytes, bytes.size() * 8 - 3);
  cwtest::write_file(c.resolve(c.store_path), bytes);
  EXPECT_THROW(ProxyService(c, {}, no_env()), StoreTamperedError);
}

TEST(Service, OracleFromConfig) {
  cwtest::TempDir dir;
  auto c = config_in(dir);
  init_material(c);
  auto oracle = make_oracle_server(c);
  oracle->start();
  EXPECT_NE(oracle->port(), 0);
  oracle->stop();
}
