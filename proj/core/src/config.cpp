#include "certwarden/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "certwarden/oracle_server.hpp"

namespace certwarden {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view why) {
  throw ConfigError(std::string(key) + " = \"" + std::string(value) + "\": " + std::string(why));
}

template <typename T>
T parse_int(std::string_view key, std::string_view v, T lo, T hi) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad(key, v, "not an integer");
  if (out < lo || out > hi) bad(key, v, "out of range");
  return out;
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

struct Field {
  std::string name;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, std::string_view)> set;
};

Field string_field(std::string name, std::string Config::*m) {
  return {name, [m](const Config& c) { return c.*m; }, [m](Config& c, std::string_view v) { c.*m = std::string(v); }};
}

Field path_field(std::string name, std::filesystem::path Config::*m) {
  return {name, [m](const Config& c) { return (c.*m).string(); },
          [m](Config& c, std::string_view v) { c.*m = std::filesystem::path(std::string(v)); }};
}

Field ms_field(std::string name, Config::Ms Config::*m) {
  return {name, [m](const Config& c) { return std::to_string((c.*m).count()); },
          [m, name](Config& c, std::string_view v) {
            c.*m = Config::Ms(parse_int<std::int64_t>(name, v, 1, std::int64_t{1} << 40));
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(path_field("data_dir", &Config::data_dir));
    f.push_back(string_field("proxy_host", &Config::proxy_host));
    f.push_back({"proxy_port", [](const Config& c) { return std::to_string(c.proxy_port); },
                 [](Config& c, std::string_view v) { c.proxy_port = parse_int<std::uint16_t>("proxy_port", v, 0, 65535); }});
    f.push_back(string_field("admin_bind", &Config::admin_bind));
    f.push_back(string_field("oracle_endpoint", &Config::oracle_endpoint));
    f.push_back(string_field("oracle_bind", &Config::oracle_bind));
    f.push_back({"oracle_rate_limit", [](const Config& c) { return std::to_string(c.oracle_rate_limit); },
                 [](Config& c, std::string_view v) {
                   c.oracle_rate_limit = parse_int<int>("oracle_rate_limit", v, 0, 1000000000);
                 }});
    f.push_back({"mode", [](const Config& c) { return std::string(to_string(c.mode)); },
                 [](Config& c, std::string_view v) {
                   const auto m = parse_policy_mode(v);
                   if (!m) bad("mode", v, "expected automatic, selective or manual");
                   c.mode = *m;
                 }});
    f.push_back({"manual_selection",
                 [](const Config& c) {
                   std::string out;
                   for (const auto& n : c.manual_selection) out += (out.empty() ? "" : ",") + n;
                   return out;
                 },
                 [](Config& c, std::string_view v) {
                   c.manual_selection.clear();
                   for (auto& n : split_list(v)) c.manual_selection.insert(std::move(n));
                 }});
    f.push_back(ms_field("pending_timeout_ms", &Config::pending_timeout));
    f.push_back(path_field("store_path", &Config::store_path));
    f.push_back(path_field("store_key_file", &Config::store_key_file));
    f.push_back(path_field("keystore_path", &Config::keystore_path));
    f.push_back(path_field("keystore_key_file", &Config::keystore_key_file));
    f.push_back(path_field("ca_cert", &Config::ca_cert));
    f.push_back(path_field("ca_key", &Config::ca_key));
    f.push_back(path_field("oracle_cert", &Config::oracle_cert));
    f.push_back(path_field("oracle_key", &Config::oracle_key));
    f.push_back(path_field("verdict_log", &Config::verdict_log));
    f.push_back(path_field("event_log", &Config::event_log));
    f.push_back(path_field("extra_trust", &Config::extra_trust));
    f.push_back({"key_profile", [](const Config& c) { return std::string(to_string(c.key_profile)); },
                 [](Config& c, std::string_view v) {
                   const auto p = parse_key_profile(v);
                   if (!p) bad("key_profile", v, "expected ec-p256 or rsa-2048");
                   c.key_profile = *p;
                 }});
    f.push_back({"ca_validity_days", [](const Config& c) { return std::to_string(c.ca_validity_days); },
                 [](Config& c, std::string_view v) {
                   c.ca_validity_days = parse_int<int>("ca_validity_days", v, 1, 36500);
                 }});
    f.push_back(ms_field("cache_ttl_ms", &Config::cache_ttl));
    f.push_back(ms_field("decision_window_ms", &Config::decision_window));
    f.push_back(ms_field("oracle_timeout_ms", &Config::oracle_timeout));
    f.push_back(ms_field("direct_timeout_ms", &Config::direct_timeout));
    f.push_back(ms_field("idle_timeout_ms", &Config::idle_timeout));
    f.push_back({"client_versions",
                 [](const Config& c) {
                   std::string out;
                   for (const auto& [k, v] : c.client_versions) out += (out.empty() ? "" : ",") + k + "=" + v;
                   return out;
                 },
                 [](Config& c, std::string_view v) {
                   c.client_versions.clear();
                   for (const auto& item : split_list(v)) {
                     const auto eq = item.find('=');
                     if (eq == std::string::npos || eq == 0) bad("client_versions", v, "expected name=version pairs");
                     c.client_versions[std::string(trim(std::string_view(item).substr(0, eq)))] =
                         std::string(trim(std::string_view(item).substr(eq + 1)));
                   }
                 }});
    return f;
  }();
  return table;
}

std::string quote(const std::string& v) {
  const bool plain = !v.empty() && v.find_first_of("\"\\#\n\r") == std::string::npos &&
                     !std::isspace(static_cast<unsigned char>(v.front())) &&
                     !std::isspace(static_cast<unsigned char>(v.back()));
  if (plain) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string unquote(std::string_view key, std::string_view v) {
  if (v.empty() || v.front() != '"') {
    const auto hash = v.find('#');
    return std::string(trim(v.substr(0, hash)));
  }
  std::string out;
  std::size_t i = 1;
  for (; i < v.size(); ++i) {
    const char c = v[i];
    if (c == '"') break;
    if (c == '\\') {
      if (++i >= v.size()) bad(key, v, "dangling escape");
      out.push_back(v[i] == 'n' ? '\n' : v[i]);
      continue;
    }
    out.push_back(c);
  }
  if (i >= v.size()) bad(key, v, "unterminated quote");
  const auto rest = trim(v.substr(i + 1));
  if (!rest.empty() && rest.front() != '#') bad(key, v, "text after closing quote");
  return out;
}

}  // namespace

std::filesystem::path Config::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return data_dir / p;
}

Endpoint Config::admin_endpoint() const {
  auto ep = parse_endpoint(admin_bind, true);
  if (!ep) throw ConfigError("admin_bind: expected host:port, got \"" + admin_bind + "\"");
  return *ep;
}

Endpoint Config::oracle_bind_endpoint() const {
  auto ep = parse_endpoint(oracle_bind, true);
  if (!ep) throw ConfigError("oracle_bind: expected host:port, got \"" + oracle_bind + "\"");
  return *ep;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.name);
  return out;
}

void apply_setting(Config& config, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.name == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key \"" + std::string(key) + "\"");
}

Config parse_config(std::string_view text, Config base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto eol = text.find('\n');
    auto line = trim(text.substr(0, eol));
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    apply_setting(base, key, unquote(key, trim(line.substr(eq + 1))));
  }
  return base;
}

std::string render_config(const Config& config) {
  std::ostringstream out;
  for (const auto& f : fields()) out << f.name << " = " << quote(f.get(config)) << "\n";
  return out.str();
}

void validate(const Config& c) {
  const auto admin = c.admin_endpoint();
  const auto oracle = c.oracle_bind_endpoint();
  if (!parse_https_url(c.oracle_endpoint)) throw ConfigError("oracle_endpoint must be an https URL");
  if (c.proxy_port != 0 && c.proxy_port == oracle.port && (c.proxy_host == oracle.host)) {
    throw ConfigError("proxy_port and the oracle port must differ when co-hosted");
  }
  if (c.proxy_port != 0 && c.proxy_port == admin.port && c.proxy_host == admin.host) {
    throw ConfigError("proxy_port and admin port must differ");
  }
  for (const auto& n : c.manual_selection) {
    if (n.find_first_of(",=") != std::string::npos) throw ConfigError("manual_selection entry contains ',' or '='");
  }
  for (const auto& [k, v] : c.client_versions) {
    if (k.empty() || k.find_first_of(",=") != std::string::npos || v.find(',') != std::string::npos) {
      throw ConfigError("client_versions entries must be name=version without commas");
    }
  }
  for (auto d : {c.pending_timeout, c.cache_ttl, c.decision_window, c.oracle_timeout, c.direct_timeout,
                 c.idle_timeout}) {
    if (d.count() <= 0) throw ConfigError("durations must be positive");
  }
}

EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  };
}

Config load_config(const std::filesystem::path& file, const std::map<std::string, std::string>& flags,
                   const EnvLookup& env) {
  Config c;
  if (!file.empty() && std::filesystem::exists(file)) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    c = parse_config(ss.str());
  }
  for (const auto& [k, v] : flags) apply_setting(c, k, v);
  for (const auto& key : config_keys()) {
    std::string var = "CERTWARDEN_";
    for (char ch : key) var.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    if (const auto v = env(var)) apply_setting(c, key, *v);
  }
  validate(c);
  return c;
}

}  // namespace certwarden
