#include "certwarden/client_ident.hpp"

#include <unistd.h>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace certwarden {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out, int base) {
  if (s.empty()) return false;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, base);
  return ec == std::errc{} && p == s.data() + s.size();
}

bool is_hex(std::string_view s) {
  for (char c : s) {
    if (!((c >= '0' && c <= '9') || (c >= 'A' && c <= 'F') || (c >= 'a' && c <= 'f'))) return false;
  }
  return !s.empty();
}

bool split_address(std::string_view field, std::string& address, std::uint16_t& port) {
  const auto colon = field.find(':');
  if (colon == std::string_view::npos) return false;
  const auto addr = field.substr(0, colon);
  if ((addr.size() != 8 && addr.size() != 32) || !is_hex(addr)) return false;
  const auto p = parse_hex_port(field);
  if (!p) return false;
  address = std::string(addr);
  port = *p;
  return true;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::optional<std::uint16_t> parse_hex_port(std::string_view address_and_port) {
  const auto colon = address_and_port.rfind(':');
  const auto port = colon == std::string_view::npos ? address_and_port : address_and_port.substr(colon + 1);
  if (port.size() != 4 || !is_hex(port)) return std::nullopt;
  std::uint16_t value = 0;
  if (!parse_number(port, value, 16)) return std::nullopt;
  return value;
}

SocketTable parse_proc_tcp(std::string_view text) {
  SocketTable table;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const auto line = text.substr(pos, eol - pos);
    pos = eol + 1;
    const auto cols = split_ws(line);
    if (cols.empty()) continue;
    if (cols[0] == "sl") continue;

    // sl local rem st tx:rx tr:tm retrnsmt uid timeout inode
    SocketRow row;
    std::uint8_t state = 0;
    if (cols.size() < 10 || cols[0].back() != ':' || !split_address(cols[1], row.local_address, row.local_port) ||
        !split_address(cols[2], row.remote_address, row.remote_port) || !parse_number(cols[3], state, 16) ||
        !parse_number(cols[7], row.uid, 10) || !parse_number(cols[9], row.inode, 10)) {
      ++table.rejected;
      continue;
    }
    row.state = state;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string format_proc_tcp_row(std::size_t slot, const SocketRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%4zu: %s:%04X %s:%04X %02X 00000000:00000000 00:00000000 00000000 %5u        0 %llu 1 "
                "0000000000000000 100 0 0 10 0",
                slot, row.local_address.c_str(), row.local_port, row.remote_address.c_str(), row.remote_port,
                row.state, row.uid, static_cast<unsigned long long>(row.inode));
  return buf;
}

ProcfsResolver::ProcfsResolver(std::filesystem::path proc_root, VersionMap versions)
    : root_(std::move(proc_root)), versions_(std::move(versions)) {}

std::size_t ProcfsResolver::last_rejected() const {
  std::lock_guard lock(mu_);
  return last_rejected_;
}

std::optional<SocketOwner> ProcfsResolver::resolve_port(std::uint16_t local_port,
                                                        std::optional<std::uint16_t> remote_port) {
  std::optional<SocketRow> match;
  std::size_t rejected = 0;
  bool any_table = false;
  for (const char* name : {"tcp", "tcp6"}) {
    const auto text = read_file(root_ / "net" / name);
    if (text.empty()) continue;
    any_table = true;
    auto table = parse_proc_tcp(text);
    rejected += table.rejected;
    for (auto& row : table.rows) {
      if (row.local_port != local_port || row.state != kTcpEstablished || row.inode == 0) continue;
      if (remote_port && row.remote_port != *remote_port) continue;
      match = std::move(row);
      break;
    }
    if (match) break;
  }
  {
    std::lock_guard lock(mu_);
    last_rejected_ = rejected;
  }
  if (!any_table || !match) return std::nullopt;

  SocketOwner owner;
  owner.local_port = local_port;
  owner.uid = match->uid;
  owner.inode = match->inode;
  const auto pid = find_inode_owner(match->inode);
  if (!pid) return std::nullopt;
  owner.pid = *pid;
  auto comm = read_file(root_ / std::to_string(*pid) / "comm");
  while (!comm.empty() && (comm.back() == '\n' || comm.back() == '\r')) comm.pop_back();
  if (comm.empty()) return std::nullopt;
  owner.process_name = comm;
  const auto v = versions_.find(owner.process_name);
  owner.version = v == versions_.end() ? std::string(kUnversioned) : v->second;
  return owner;
}

std::optional<pid_t> ProcfsResolver::find_inode_owner(std::uint64_t inode) const {
  const std::string needle = "socket:[" + std::to_string(inode) + "]";
  std::error_code ec;
  for (const auto& proc : std::filesystem::directory_iterator(root_, ec)) {
    const auto pid_text = proc.path().filename().string();
    pid_t pid = 0;
    if (!parse_number(std::string_view(pid_text), pid, 10)) continue;
    std::error_code fd_ec;
    for (const auto& fd : std::filesystem::directory_iterator(proc.path() / "fd", fd_ec)) {
      std::error_code link_ec;
      const auto target = std::filesystem::read_symlink(fd.path(), link_ec);
      if (!link_ec && target.native() == needle) return pid;
    }
  }
  return std::nullopt;
}

void TableResolver::add(SocketOwner owner) {
  std::lock_guard lock(mu_);
  owners_[owner.local_port] = std::move(owner);
}

void TableResolver::remove(std::uint16_t local_port) {
  std::lock_guard lock(mu_);
  owners_.erase(local_port);
}

std::optional<SocketOwner> TableResolver::resolve_port(std::uint16_t local_port, std::optional<std::uint16_t>) {
  std::lock_guard lock(mu_);
  const auto it = owners_.find(local_port);
  if (it == owners_.end()) return std::nullopt;
  return it->second;
}

}  // namespace certwarden
