#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "certwarden/client_ident.hpp"
#include "fixtures.hpp"

using namespace certwarden;
using namespace std::chrono_literals;

namespace {

constexpr std::string_view kHeader =
    "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n";

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

}  // namespace

TEST(ProcTcp, HexPort) {
  EXPECT_EQ(parse_hex_port("0100007F:01BB"), 443);
  EXPECT_EQ(parse_hex_port("00000000000000000000000001000000:1F90"), 8080);
  EXPECT_FALSE(parse_hex_port("0100007F:1BB"));
  EXPECT_FALSE(parse_hex_port("0100007F"));
  EXPECT_FALSE(parse_hex_port("0100007F:ZZZZ"));
}

TEST(ProcTcp, ParsesKernelRow) {
  const std::string text = std::string(kHeader) +
                           "   0: 0100007F:C350 0100007F:1F90 01 00000000:00000000 00:00000000 00000000  1000"
                           "        0 123456 1 0000000000000000 20 4 30 10 -1\n";
  const auto table = parse_proc_tcp(text);
  ASSERT_EQ(table.rows.size(), 1u);
  EXPECT_EQ(table.rejected, 0u);
  const auto& r = table.rows[0];
  EXPECT_EQ(r.local_address, "0100007F");
  EXPECT_EQ(r.local_port, 50000);
  EXPECT_EQ(r.remote_port, 8080);
  EXPECT_EQ(r.state, kTcpEstablished);
  EXPECT_EQ(r.uid, 1000u);
  EXPECT_EQ(r.inode, 123456u);
}

TEST(ProcTcp, HeaderOnlyAndTruncatedRows) {
  EXPECT_TRUE(parse_proc_tcp(kHeader).rows.empty());
  EXPECT_EQ(parse_proc_tcp(kHeader).rejected, 0u);
  EXPECT_TRUE(parse_proc_tcp("").rows.empty());
  const std::string truncated = std::string(kHeader) + "   0: 0100007F:C350 0100007F:1F90 01 0000\n";
  const auto table = parse_proc_tcp(truncated);
  EXPECT_TRUE(table.rows.empty());
  EXPECT_EQ(table.rejected, 1u);
}

TEST(ProcTcp, FormatParseRoundTrip) {
  std::mt19937_64 rng(5);
  std::string text(kHeader);
  std::vector<SocketRow> rows;
  for (std::size_t i = 0; i < 1000; ++i) {
    rows.push_back(cwtest::random_row(rng));
    text += format_proc_tcp_row(i, rows.back()) + "\n";
  }
  const auto table = parse_proc_tcp(text);
  EXPECT_EQ(table.rejected, 0u);
  EXPECT_EQ(table.rows, rows);
}

TEST(ProcfsResolver, FakeProcTree) {
  cwtest::TempDir root;
  SocketRow row;
  row.local_address = "0100007F";
  row.local_port = 40000;
  row.remote_address = "0100007F";
  row.remote_port = 8080;
  row.state = kTcpEstablished;
  row.inode = 777;
  SocketRow listening = row;
  listening.local_port = 40001;
  listening.state = 0x0A;
  write_text(root / "net/tcp", std::string(kHeader) + format_proc_tcp_row(0, row) + "\n" +
                                   format_proc_tcp_row(1, listening) + "\n   2: garbage\n");
  write_text(root / "4242/comm", "strict-mail\n");
  std::filesystem::create_directories(root / "4242/fd");
  std::filesystem::create_symlink("socket:[777]", root / "4242/fd/5");
  std::filesystem::create_directories(root / "self/fd");

  ProcfsResolver resolver(root.path(), {{"strict-mail", "2.3"}});
  const auto owner = resolver.resolve_port(40000);
  ASSERT_TRUE(owner);
  EXPECT_EQ(owner->pid, 4242);
  EXPECT_EQ(owner->process_name, "strict-mail");
  EXPECT_EQ(owner->version, "2.3");
  EXPECT_EQ(owner->inode, 777u);
  EXPECT_EQ(resolver.last_rejected(), 1u);

  EXPECT_TRUE(resolver.resolve_port(40000, 8080));
  EXPECT_FALSE(resolver.resolve_port(40000, 9090));
  EXPECT_FALSE(resolver.resolve_port(40001));
  EXPECT_FALSE(resolver.resolve_port(40002));

  ProcfsResolver unversioned(root.path());
  EXPECT_EQ(unversioned.resolve_port(40000)->version, kUnversioned);
}

TEST(ProcfsResolver, MissingTablesMeanUnknown) {
  cwtest::TempDir root;
  ProcfsResolver resolver(root.path());
  EXPECT_FALSE(resolver.resolve_port(1234));
}

TEST(ProcfsResolver, ResolvesHelperProcessByName) {
  auto listener = Listener::bind("127.0.0.1", 0);
  cwtest::HelperProcess helper("cw-helper", listener.endpoint());
  auto accepted = listener.accept(deadline_in(5s));
  ASSERT_TRUE(accepted.valid());
  const auto peer = accepted.peer_port();
  ProcfsResolver resolver;
  const auto owner = resolver.resolve_port(peer, listener.endpoint().port);
  ASSERT_TRUE(owner);
  EXPECT_EQ(owner->pid, helper.pid());
  EXPECT_EQ(owner->process_name, "cw-helper");
  EXPECT_EQ(owner->version, kUnversioned);
}

TEST(ProcfsResolver, ResolvesOwnSocket) {
  auto [client, server] = cwtest::loopback_pair();
  ProcfsResolver resolver;
  const auto owner = resolver.resolve_port(client.local_port(), server.local_port());
  ASSERT_TRUE(owner);
  EXPECT_EQ(owner->pid, ::getpid());
}

TEST(ProcfsResolver, ClosedPortResolvesToNothing) {
  std::uint16_t port = 0;
  {
    auto [client, server] = cwtest::loopback_pair();
    port = client.local_port();
  }
  ProcfsResolver resolver;
  EXPECT_FALSE(resolver.resolve_port(port));
}

TEST(TableResolver, AddRemove) {
  TableResolver resolver;
  SocketOwner o;
  o.local_port = 5555;
  o.process_name = "x";
  resolver.add(o);
  EXPECT_EQ(resolver.resolve_port(5555)->process_name, "x");
  resolver.remove(5555);
  EXPECT_FALSE(resolver.resolve_port(5555));
  EXPECT_FALSE(UnknownResolver().resolve_port(5555, std::nullopt));
}
