#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "certwarden/bytes.hpp"

namespace certwarden {

using SteadyClock = std::chrono::steady_clock;
using Deadline = SteadyClock::time_point;

inline Deadline deadline_in(std::chrono::milliseconds d) { return SteadyClock::now() + d; }

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const;
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
  friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

/// Accepts "host:port" and "[v6]:port". Port 0 is only valid for listen
/// addresses, where it asks for an ephemeral port.
std::optional<Endpoint> parse_endpoint(std::string_view text, bool allow_port_zero = false);

bool is_ip_literal(std::string_view host);

class NetError : public std::runtime_error {
 public:
  enum class Kind { ConnectFailed, Timeout, Closed, Io };
  NetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Owning, always non-blocking TCP socket.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd);
  Socket(Socket&& other) noexcept;
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();
  /// Closes with SO_LINGER=0 so the peer observes a connection reset.
  void reset();
  void shutdown_write();

  std::uint16_t local_port() const;
  std::uint16_t peer_port() const;
  std::string peer_address() const;

 private:
  int fd_ = -1;
};

/// Waits until `fd` is readable (or writable). False on deadline.
bool wait_fd(int fd, bool for_write, Deadline deadline);

Socket connect_tcp(const Endpoint& endpoint, Deadline deadline);

class Listener {
 public:
  /// port 0 picks an ephemeral port.
  static Listener bind(const std::string& host, std::uint16_t port, int backlog = 128);

  /// Invalid socket on deadline expiry or after close().
  Socket accept(Deadline deadline);
  std::uint16_t port() const { return port_; }
  const std::string& host() const { return host_; }
  Endpoint endpoint() const { return {host_, port_}; }
  void close() { socket_.close(); }

 private:
  Socket socket_;
  std::string host_;
  std::uint16_t port_ = 0;
};

/// Opens connections toward logical endpoints. Implementations decide where
/// the bytes actually go, which is how the lab positions attackers.
class Dialer {
 public:
  virtual ~Dialer() = default;
  virtual Socket connect(const Endpoint& target, Deadline deadline) const = 0;
};

class SystemDialer final : public Dialer {
 public:
  Socket connect(const Endpoint& target, Deadline deadline) const override;
};

/// Host-override table in front of the system resolver.
class NetworkMap final : public Dialer {
 public:
  void route(const Endpoint& logical, const Endpoint& actual);
  void unroute(const Endpoint& logical);
  std::optional<Endpoint> lookup(const Endpoint& logical) const;
  Socket connect(const Endpoint& target, Deadline deadline) const override;

 private:
  mutable std::shared_mutex mu_;
  std::map<Endpoint, Endpoint> routes_;
};

enum class IoStatus { Ok, WouldBlock, Eof, Error };

struct IoResult {
  IoStatus status = IoStatus::Ok;
  std::size_t n = 0;
  bool want_write = false;
};

/// Byte stream over a non-blocking socket. try_* never block; the helpers
/// below add deadlines.
class Stream {
 public:
  virtual ~Stream() = default;
  virtual IoResult try_read(std::span<std::uint8_t> buf) = 0;
  virtual IoResult try_write(ByteView data) = 0;
  virtual bool has_buffered() const { return false; }
  virtual void shutdown_write() = 0;
  virtual int fd() const = 0;

  /// 0 on orderly EOF; throws NetError on timeout or I/O failure.
  std::size_t read_some(std::span<std::uint8_t> buf, Deadline deadline);
  void write_all(ByteView data, Deadline deadline);
  void write_all(std::string_view data, Deadline deadline) { write_all(as_bytes(data), deadline); }
  /// Reads until EOF or `max` bytes.
  std::string read_to_end(Deadline deadline, std::size_t max = 1 << 20);
  /// Reads through the first occurrence of `delim`, one byte at a time so
  /// nothing past it is consumed. nullopt on EOF or when `max` is exceeded.
  std::optional<std::string> read_until(std::string_view delim, std::size_t max, Deadline deadline);
};

class PlainStream final : public Stream {
 public:
  explicit PlainStream(Socket socket) : socket_(std::move(socket)) {}
  IoResult try_read(std::span<std::uint8_t> buf) override;
  IoResult try_write(ByteView data) override;
  void shutdown_write() override { socket_.shutdown_write(); }
  int fd() const override { return socket_.fd(); }
  Socket& socket() { return socket_; }

 private:
  Socket socket_;
};

struct RelayStats {
  std::uint64_t a_to_b = 0;
  std::uint64_t b_to_a = 0;
  std::optional<SteadyClock::time_point> first_byte;
  bool error = false;
};

/// Pumps bytes both ways until both sides reach EOF, an error occurs, or no
/// traffic is seen for `idle`. EOF on one side is propagated as a write
/// shutdown on the other.
RelayStats relay(Stream& a, Stream& b, std::chrono::milliseconds idle);

}  // namespace certwarden
