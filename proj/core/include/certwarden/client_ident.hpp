#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <sys/types.h>
#include <vector>

namespace certwarden {

/// One row of a kernel TCP socket table (/proc/net/tcp or tcp6).
struct SocketRow {
  std::string local_address;  // kernel hex form
  std::uint16_t local_port = 0;
  std::string remote_address;
  std::uint16_t remote_port = 0;
  std::uint8_t state = 0;
  std::uint32_t uid = 0;
  std::uint64_t inode = 0;

  friend bool operator==(const SocketRow&, const SocketRow&) = default;
};

constexpr std::uint8_t kTcpEstablished = 0x01;

struct SocketTable {
  std::vector<SocketRow> rows;
  std::size_t rejected = 0;
};

/// Lenient parser: header skipped, malformed rows counted and dropped.
SocketTable parse_proc_tcp(std::string_view text);

/// Renders a row in the kernel's layout; parse_proc_tcp reads it back.
std::string format_proc_tcp_row(std::size_t slot, const SocketRow& row);

/// "0100007F:01BB" -> 443. nullopt when the port field is not 4 hex digits.
std::optional<std::uint16_t> parse_hex_port(std::string_view address_and_port);

struct SocketOwner {
  std::uint16_t local_port = 0;
  std::uint32_t uid = 0;
  std::uint64_t inode = 0;
  std::string process_name;
  pid_t pid = 0;
  std::string version;
};

/// Source port -> originating process.
class SocketResolver {
 public:
  virtual ~SocketResolver() = default;
  /// `remote_port`, when given, must also match (disambiguates loopback
  /// pairs where both ends live on this host).
  virtual std::optional<SocketOwner> resolve_port(std::uint16_t local_port,
                                                  std::optional<std::uint16_t> remote_port = std::nullopt) = 0;
};

using VersionMap = std::map<std::string, std::string, std::less<>>;

inline constexpr std::string_view kUnversioned = "unversioned";

/// Reads <root>/net/tcp and tcp6, then walks <root>/<pid>/fd to find the
/// socket inode's owner.
class ProcfsResolver final : public SocketResolver {
 public:
  explicit ProcfsResolver(std::filesystem::path proc_root = "/proc", VersionMap versions = {});
  std::optional<SocketOwner> resolve_port(std::uint16_t local_port,
                                          std::optional<std::uint16_t> remote_port = std::nullopt) override;

  /// Rows rejected by the last table parse.
  std::size_t last_rejected() const;

 private:
  std::optional<pid_t> find_inode_owner(std::uint64_t inode) const;

  std::filesystem::path root_;
  VersionMap versions_;
  mutable std::mutex mu_;
  std::size_t last_rejected_ = 0;
};

/// Fixed table for tests and the lab; entries may be added at runtime.
class TableResolver final : public SocketResolver {
 public:
  void add(SocketOwner owner);
  void remove(std::uint16_t local_port);
  std::optional<SocketOwner> resolve_port(std::uint16_t local_port,
                                          std::optional<std::uint16_t> remote_port = std::nullopt) override;

 private:
  std::mutex mu_;
  std::map<std::uint16_t, SocketOwner> owners_;
};

/// Always unknown; clients become per-port pseudo-clients.
class UnknownResolver final : public SocketResolver {
 public:
  std::optional<SocketOwner> resolve_port(std::uint16_t, std::optional<std::uint16_t>) override {
    return std::nullopt;
  }
};

}  // namespace certwarden
