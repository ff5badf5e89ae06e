// certwarden command line: runs the proxy and the oracle, manages the local
// CA and the whitelist, and drives the lab suites.

#include <csignal>
#include <ctime>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "certwarden/config.hpp"
#include "certwarden/service.hpp"
#include "certwarden/simlab.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cw = certwarden;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_file = "certwarden.conf";
  std::vector<std::string> sets;
};

cw::Config load(const Globals& g) {
  std::map<std::string, std::string> flags;
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw cw::ConfigError("--set expects key=value, got \"" + s + "\"");
    flags[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return cw::load_config(g.config_file, flags);
}

sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

void wait_for_stop(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
  std::cerr << "stopping\n";
}

std::string iso_time(std::int64_t unix_seconds) {
  const std::time_t t = unix_seconds;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

httplib::Client admin_client(const cw::Config& c) {
  const auto ep = c.admin_endpoint();
  httplib::Client cli(ep.host, ep.port);
  cli.set_connection_timeout(std::chrono::seconds(3));
  cli.set_read_timeout(std::chrono::seconds(10));
  return cli;
}

json admin_call(const cw::Config& c, const std::string& method, const std::string& path, const json& body = {}) {
  auto cli = admin_client(c);
  const auto res = method == "GET" ? cli.Get(path) : cli.Post(path, body.dump(), "application/json");
  if (!res) throw std::runtime_error("admin API at " + c.admin_bind + " unreachable: " + httplib::to_string(res.error()));
  auto reply = json::parse(res->body, nullptr, false);
  if (res->status != 200) {
    const auto msg = reply.is_object() && reply.contains("error") ? reply["error"].dump() : res->body;
    throw std::runtime_error("admin API answered " + std::to_string(res->status) + ": " + msg);
  }
  return reply;
}

std::shared_ptr<cw::WhitelistStore> open_store(const cw::Config& c) {
  return cw::WhitelistStore::open(c.resolve(c.store_path),
                                  cw::load_key(c.resolve(c.store_key_file), cw::kStoreKeyEnv, cw::process_env()));
}

void print_entries(const json& entries) {
  std::cout << std::left << std::setw(24) << "name" << std::setw(14) << "version" << std::setw(22) << "inserted"
            << std::setw(9) << "enforce" << "first_url\n";
  for (const auto& e : entries) {
    std::cout << std::setw(24) << e["name"].get<std::string>() << std::setw(14) << e["version"].get<std::string>()
              << std::setw(22) << iso_time(e["inserted_at"].get<std::int64_t>()) << std::setw(9)
              << (e["enforce_anyway"].get<bool>() ? "yes" : "no") << e["first_url"].get<std::string>() << "\n";
  }
}

json entries_json(const std::vector<cw::WhitelistEntry>& entries) {
  auto arr = json::array();
  for (const auto& e : entries) arr.push_back(json::parse(cw::whitelist_entry_to_json(e)));
  return arr;
}

int report(bool ok, bool as_json, const std::string& json_text, const std::string& table) {
  std::cout << (as_json ? json_text + "\n" : table);
  return ok ? cw::kExitOk : cw::kExitExpectation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certwarden: audits the TLS validation of local clients and guards vulnerable ones"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_file, "configuration file (key = value lines)")->capture_default_str();
  app.add_option("--set", g.sets, "override a setting; repeatable")->type_name("KEY=VALUE");

  std::function<int()> action;

  auto* proxy = app.add_subcommand("proxy", "interception proxy")->require_subcommand(1);
  bool with_oracle = false;
  auto* proxy_run = proxy->add_subcommand("run", "run the proxy and its admin API in the foreground");
  proxy_run->add_flag("--with-oracle", with_oracle, "also serve the chain oracle from this process");
  proxy_run->callback([&] {
    action = [&] {
      const auto signals = block_stop_signals();
      const auto c = load(g);
      std::unique_ptr<cw::OracleServer> oracle;
      if (with_oracle) {
        oracle = cw::make_oracle_server(c);
        oracle->start();
        std::cerr << "oracle listening on " << oracle->endpoint().to_string() << "\n";
      }
      cw::ProxyService service(c);
      service.start();
      std::cerr << "proxy listening on " << service.proxy().endpoint().to_string() << ", admin on "
                << c.admin_endpoint().host << ":" << service.admin().port() << ", mode "
                << cw::to_string(c.mode) << "\n";
      wait_for_stop(signals);
      service.stop();
      if (oracle) oracle->stop();
      return cw::kExitOk;
    };
  });

  auto* oracle = app.add_subcommand("oracle", "chain oracle")->require_subcommand(1);
  oracle->add_subcommand("run", "serve GET /getSSLCertificate in the foreground")->callback([&] {
    action = [&] {
      const auto signals = block_stop_signals();
      const auto c = load(g);
      auto server = cw::make_oracle_server(c);
      server->start();
      std::cerr << "oracle listening on " << server->endpoint().to_string() << "\n";
      wait_for_stop(signals);
      server->stop();
      return cw::kExitOk;
    };
  });

  auto* ca = app.add_subcommand("ca", "local certificate authority")->require_subcommand(1);
  bool force = false;
  auto* ca_init = ca->add_subcommand("init", "generate the CA, the oracle identity, the keystore and the keys");
  ca_init->add_flag("--force", force, "replace existing files");
  ca_init->callback([&] {
    action = [&] {
      const auto c = load(g);
      for (const auto& p : cw::init_material(c, force)) std::cout << "wrote " << p.string() << "\n";
      return cw::kExitOk;
    };
  });
  std::string export_path;
  auto* ca_export = ca->add_subcommand("export", "print (or write) the CA certificate for client trust stores");
  ca_export->add_option("-o,--out", export_path, "write PEM here instead of stdout");
  ca_export->callback([&] {
    action = [&] {
      const auto pem = cw::load_ca(load(g)).certificate_pem();
      if (export_path.empty()) {
        std::cout << pem;
      } else {
        cw::write_text_file(export_path, pem);
        std::cerr << "wrote " << export_path << "\n";
      }
      return cw::kExitOk;
    };
  });

  auto* wl = app.add_subcommand("whitelist", "clients trusted to validate TLS themselves")->require_subcommand(1);
  bool via_admin = false;
  bool as_json = false;
  auto* wl_list = wl->add_subcommand("list", "list entries");
  wl_list->add_flag("--admin", via_admin, "ask the running proxy instead of reading the store file");
  wl_list->add_flag("--json", as_json, "JSON output");
  wl_list->callback([&] {
    action = [&] {
      const auto c = load(g);
      const json entries = via_admin ? admin_call(c, "GET", "/whitelist") : entries_json(open_store(c)->list());
      if (as_json) {
        std::cout << entries.dump(2) << "\n";
      } else {
        print_entries(entries);
      }
      return cw::kExitOk;
    };
  });
  std::string wl_name;
  std::string wl_version;
  auto* wl_remove = wl->add_subcommand("remove", "remove an entry; the client is pentested again on its next flow");
  wl_remove->add_option("name", wl_name, "client name")->required();
  wl_remove->add_option("version", wl_version, "client version")->required();
  wl_remove->add_flag("--admin", via_admin, "go through the running proxy (required while it runs)");
  wl_remove->callback([&] {
    action = [&] {
      const auto c = load(g);
      if (via_admin) {
        admin_call(c, "POST", "/whitelist", {{"op", "remove"}, {"name", wl_name}, {"version", wl_version}});
      } else if (!open_store(c)->remove(wl_name, wl_version)) {
        std::cerr << "no entry for " << wl_name << " " << wl_version << "\n";
        return cw::kExitRuntime;
      }
      std::cout << "removed " << wl_name << " " << wl_version << "\n";
      return cw::kExitOk;
    };
  });

  auto* pentest = app.add_subcommand("pentest", "pentest history")->require_subcommand(1);
  auto* pentest_report = pentest->add_subcommand("report", "latest verdict per client from the verdict log");
  pentest_report->add_flag("--json", as_json, "JSON output");
  pentest_report->callback([&] {
    action = [&] {
      const auto c = load(g);
      struct Summary {
        cw::VerdictRecord latest;
        std::size_t runs = 0;
      };
      std::map<std::pair<std::string, std::string>, Summary> by_client;
      for (const auto& r : cw::VerdictLog::load(c.resolve(c.verdict_log))) {
        auto& s = by_client[{r.client, r.version}];
        ++s.runs;
        if (r.ts >= s.latest.ts) s.latest = r;
      }
      if (as_json) {
        auto arr = json::array();
        for (const auto& [k, s] : by_client) {
          auto j = json::parse(s.latest.to_json());
          j["runs"] = s.runs;
          arr.push_back(j);
        }
        std::cout << arr.dump(2) << "\n";
        return cw::kExitOk;
      }
      std::cout << std::left << std::setw(24) << "client" << std::setw(14) << "version" << std::setw(12) << "verdict"
                << std::setw(34) << "evidence" << "runs\n";
      for (const auto& [k, s] : by_client) {
        std::cout << std::setw(24) << k.first << std::setw(14) << k.second << std::setw(12)
                  << cw::to_string(s.latest.verdict) << std::setw(34)
                  << (s.latest.evidence ? std::string(cw::to_string(*s.latest.evidence)) : "-") << s.runs << "\n";
      }
      return cw::kExitOk;
    };
  });

  auto* simlab = app.add_subcommand("simlab", "loopback laboratory suites")->require_subcommand(1);
  std::size_t runs = 20;
  std::size_t trials = 10;
  std::size_t bench_trials = 30;
  std::size_t bench_requests = 3;
  bool warm = false;
  auto* detect = simlab->add_subcommand("detect", "pentest naive, strict and pinned clients");
  detect->add_option("--runs", runs, "requests per client")->capture_default_str();
  detect->add_flag("--json", as_json, "JSON output");
  detect->callback([&] {
    action = [&] {
      cw::sim::Lab lab;
      const auto r = cw::sim::run_detection_matrix(lab, cw::sim::default_clients(), runs);
      return report(r.passed(), as_json, r.to_json(), r.to_table());
    };
  });
  auto* attack = simlab->add_subcommand("attack", "enforcement against every attacker placement");
  attack->add_option("--trials", trials, "trials per placement")->capture_default_str();
  attack->add_flag("--json", as_json, "JSON output");
  attack->callback([&] {
    action = [&] {
      cw::sim::Lab lab;
      const auto r = cw::sim::run_attack_matrix(lab, cw::sim::all_placements(), trials);
      return report(r.passed(), as_json, r.to_json(), r.to_table());
    };
  });
  auto* bench = simlab->add_subcommand("bench", "latency of passthrough against enforcement");
  bench->add_option("--trials", bench_trials, "trials per run (at least 30 for a valid report)")->capture_default_str();
  bench->add_option("--requests", bench_requests, "requests per trial")->capture_default_str();
  bench->add_flag("--warm", warm, "keep the chain cache on for the protected run");
  bench->add_flag("--json", as_json, "JSON output");
  bench->callback([&] {
    action = [&] {
      cw::sim::Lab lab;
      const auto r = cw::sim::run_overhead_bench(lab, {bench_trials, bench_requests, !warm});
      return report(r.valid, as_json, r.to_json(), r.to_table());
    };
  });

  auto* mode = app.add_subcommand("mode", "policy mode of the running proxy")->require_subcommand(1);
  std::string mode_name;
  std::vector<std::string> selection;
  std::int64_t pending_ms = 0;
  auto* mode_set = mode->add_subcommand("set", "switch mode through the admin API");
  mode_set->add_option("mode", mode_name, "automatic, selective or manual")
      ->required()
      ->check(CLI::IsMember({"automatic", "selective", "manual"}, CLI::ignore_case));
  mode_set->add_option("--select", selection, "clients analysed in manual mode; repeatable");
  mode_set->add_option("--pending-timeout-ms", pending_ms, "how long a decision may stay pending");
  mode_set->callback([&] {
    action = [&] {
      const auto c = load(g);
      json body = {{"mode", mode_name}};
      if (!selection.empty()) body["manual_selection"] = selection;
      if (pending_ms > 0) body["pending_timeout_ms"] = pending_ms;
      std::cout << admin_call(c, "POST", "/mode", body).dump() << "\n";
      return cw::kExitOk;
    };
  });
  mode->add_subcommand("show", "print the current mode")->callback([&] {
    action = [&] {
      std::cout << admin_call(load(g), "GET", "/mode").dump() << "\n";
      return cw::kExitOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cw::kExitOk : cw::kExitConfig;
  }

  try {
    return action ? action() : cw::kExitConfig;
  } catch (const cw::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return cw::kExitConfig;
  } catch (const cw::KeystoreError& e) {
    std::cerr << "refusing to start: oracle keystore rejected: " << e.what() << "\n";
    return cw::kExitRuntime;
  } catch (const cw::StoreTamperedError& e) {
    std::cerr << "refusing to start: whitelist store rejected: " << e.what() << "\n";
    return cw::kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cw::kExitRuntime;
  }
}
