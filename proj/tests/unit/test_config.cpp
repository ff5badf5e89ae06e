#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "certwarden/config.hpp"
#include "fixtures.hpp"

using namespace certwarden;
using namespace std::chrono_literals;

namespace {

EnvLookup env_of(std::map<std::string, std::string> vars) {
  return [vars = std::move(vars)](const std::string& name) -> std::optional<std::string> {
    const auto it = vars.find(name);
    if (it == vars.end()) return std::nullopt;
    return it->second;
  };
}

std::string random_text(std::mt19937_64& rng) {
  static const std::string alphabet = "abcXYZ019 -_./\"\\#=";
  std::string s;
  const std::size_t n = rng() % 12;
  for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
  return s;
}

std::string random_name(std::mt19937_64& rng) {
  static const std::string alphabet = "abcdefgxyz0123-_.";
  std::string s(1, 'c');
  const std::size_t n = rng() % 8;
  for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
  return s;
}

}  // namespace

TEST(Config, DefaultsRenderAndParseBack) {
  const Config defaults;
  EXPECT_EQ(parse_config(render_config(defaults)), defaults);
  EXPECT_NO_THROW(validate(defaults));
  const auto keys = config_keys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "proxy_port"), keys.end());
  EXPECT_NE(std::find(keys.begin(), keys.end(), "pending_timeout_ms"), keys.end());
}

TEST(Config, RenderParseRoundTripProperty) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 300; ++i) {
    Config c;
    c.data_dir = random_text(rng);
    c.proxy_host = random_text(rng);
    c.proxy_port = static_cast<std::uint16_t>(rng() % 65536);
    c.oracle_rate_limit = static_cast<int>(rng() % 1000);
    c.mode = static_cast<PolicyMode>(rng() % 3);
    for (std::size_t k = rng() % 4; k > 0; --k) c.manual_selection.insert(random_name(rng));
    for (std::size_t k = rng() % 4; k > 0; --k) c.client_versions[random_name(rng)] = random_name(rng);
    c.pending_timeout = Config::Ms(1 + rng() % 100000);
    c.cache_ttl = Config::Ms(1 + rng() % 10000000);
    c.event_log = random_text(rng);
    c.extra_trust = random_text(rng);
    c.key_profile = rng() % 2 ? KeyProfile::EcP256 : KeyProfile::Rsa2048;
    c.ca_validity_days = static_cast<int>(1 + rng() % 3650);
    const auto text = render_config(c);
    EXPECT_EQ(parse_config(text), c) << text;
  }
}

TEST(Config, FileSyntax) {
  const auto c = parse_config(
      "# comment\n"
      "\n"
      "proxy_port = 9090\n"
      "  mode=selective  \n"
      "data_dir = \"/var/lib/a \\\"b\\\"\"\n"
      "manual_selection = mail, shop\n"
      "client_versions = strict-mail=2.3,naive-shop=1.0\n");
  EXPECT_EQ(c.proxy_port, 9090);
  EXPECT_EQ(c.mode, PolicyMode::Selective);
  EXPECT_EQ(c.data_dir, "/var/lib/a \"b\"");
  EXPECT_EQ(c.manual_selection, (std::set<std::string>{"mail", "shop"}));
  EXPECT_EQ(c.client_versions.at("strict-mail"), "2.3");
}

TEST(Config, RejectsBadInput) {
  for (const char* bad : {"nonsense", "unknown_key = 1", "proxy_port = 70000", "proxy_port = abc", "mode = fast",
                          "pending_timeout_ms = 0", "key_profile = dsa", "client_versions = noversion",
                          "data_dir = \"unterminated"}) {
    EXPECT_THROW(parse_config(bad), ConfigError) << bad;
  }
}

TEST(Config, Validation) {
  Config c;
  c.oracle_endpoint = "http://127.0.0.1:8443";
  EXPECT_THROW(validate(c), ConfigError);
  c = Config{};
  c.proxy_port = 8443;
  EXPECT_THROW(validate(c), ConfigError);
  c = Config{};
  c.proxy_port = 8081;
  EXPECT_THROW(validate(c), ConfigError);
  c = Config{};
  c.manual_selection = {"a,b"};
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, PrecedenceFileFlagsEnv) {
  cwtest::TempDir dir;
  std::ofstream(dir / "c.conf") << "proxy_port = 9000\nmode = manual\ncache_ttl_ms = 5\n";
  const auto file_only = load_config(dir / "c.conf", {}, env_of({}));
  EXPECT_EQ(file_only.proxy_port, 9000);

  const auto with_flag = load_config(dir / "c.conf", {{"proxy_port", "9001"}}, env_of({}));
  EXPECT_EQ(with_flag.proxy_port, 9001);
  EXPECT_EQ(with_flag.mode, PolicyMode::Manual);

  const auto with_env = load_config(dir / "c.conf", {{"proxy_port", "9001"}},
                                    env_of({{"CERTWARDEN_PROXY_PORT", "9002"}, {"CERTWARDEN_MODE", "selective"}}));
  EXPECT_EQ(with_env.proxy_port, 9002);
  EXPECT_EQ(with_env.mode, PolicyMode::Selective);
  EXPECT_EQ(with_env.cache_ttl, 5ms);

  // A missing file is not an error; bad values from any layer are.
  EXPECT_EQ(load_config(dir / "absent.conf", {}, env_of({})), Config{});
  EXPECT_THROW(load_config(dir / "c.conf", {{"proxy_port", "x"}}, env_of({})), ConfigError);
  EXPECT_THROW(load_config(dir / "c.conf", {}, env_of({{"CERTWARDEN_MODE", "x"}})), ConfigError);
}

TEST(Config, PathsResolveAgainstDataDir) {
  Config c;
  c.data_dir = "/srv/cw";
  EXPECT_EQ(c.resolve("ca.pem"), "/srv/cw/ca.pem");
  EXPECT_EQ(c.resolve("/etc/ca.pem"), "/etc/ca.pem");
  EXPECT_EQ(c.admin_endpoint(), (Endpoint{"127.0.0.1", 8081}));
}
