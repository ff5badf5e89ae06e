#include "certwarden/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <cstring>
#include <mutex>
#include <vector>

namespace certwarden {

namespace {

void ignore_sigpipe_once() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

int remaining_ms(Deadline deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - SteadyClock::now());
  if (left.count() <= 0) return 0;
  return left.count() > 1'000'000 ? 1'000'000 : static_cast<int>(left.count());
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

}  // namespace

std::string Endpoint::to_string() const {
  if (host.find(':') != std::string::npos) return "[" + host + "]:" + std::to_string(port);
  return host + ":" + std::to_string(port);
}

std::optional<Endpoint> parse_endpoint(std::string_view text, bool allow_port_zero) {
  std::string_view host;
  std::string_view port;
  if (!text.empty() && text.front() == '[') {
    const auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() || text[close + 1] != ':') {
      return std::nullopt;
    }
    host = text.substr(1, close - 1);
    port = text.substr(close + 2);
  } else {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    host = text.substr(0, colon);
    port = text.substr(colon + 1);
    if (host.find(':') != std::string_view::npos) return std::nullopt;
  }
  if (host.empty() || port.empty() || port.size() > 5) return std::nullopt;
  unsigned value = 0;
  for (char c : port) {
    if (c < '0' || c > '9') return std::nullopt;
    value = value * 10 + static_cast<unsigned>(c - '0');
  }
  if ((value == 0 && !allow_port_zero) || value > 65535) return std::nullopt;
  return Endpoint{std::string(host), static_cast<std::uint16_t>(value)};
}

bool is_ip_literal(std::string_view host) {
  const std::string h(host);
  in_addr v4{};
  in6_addr v6{};
  return inet_pton(AF_INET, h.c_str(), &v4) == 1 || inet_pton(AF_INET6, h.c_str(), &v6) == 1;
}

Socket::Socket(int fd) : fd_(fd) {
  ignore_sigpipe_once();
  if (fd_ >= 0) set_nonblocking(fd_);
}

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

Socket::~Socket() { close(); }

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::reset() {
  if (fd_ < 0) return;
  linger lg{1, 0};
  setsockopt(fd_, SOL_SOCKET, SO_LINGER, &lg, sizeof(lg));
  close();
}

void Socket::shutdown_write() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
}

namespace {

std::uint16_t port_of(const sockaddr_storage& ss) {
  if (ss.ss_family == AF_INET) return ntohs(reinterpret_cast<const sockaddr_in&>(ss).sin_port);
  if (ss.ss_family == AF_INET6) return ntohs(reinterpret_cast<const sockaddr_in6&>(ss).sin6_port);
  return 0;
}

}  // namespace

std::uint16_t Socket::local_port() const {
  sockaddr_storage ss{};
  socklen_t len = sizeof(ss);
  if (getsockname(fd_, reinterpret_cast<sockaddr*>(&ss), &len) != 0) return 0;
  return port_of(ss);
}

std::uint16_t Socket::peer_port() const {
  sockaddr_storage ss{};
  socklen_t len = sizeof(ss);
  if (getpeername(fd_, reinterpret_cast<sockaddr*>(&ss), &len) != 0) return 0;
  return port_of(ss);
}

std::string Socket::peer_address() const {
  sockaddr_storage ss{};
  socklen_t len = sizeof(ss);
  if (getpeername(fd_, reinterpret_cast<sockaddr*>(&ss), &len) != 0) return {};
  char buf[INET6_ADDRSTRLEN] = {};
  if (ss.ss_family == AF_INET) {
    inet_ntop(AF_INET, &reinterpret_cast<const sockaddr_in&>(ss).sin_addr, buf, sizeof(buf));
  } else if (ss.ss_family == AF_INET6) {
    inet_ntop(AF_INET6, &reinterpret_cast<const sockaddr_in6&>(ss).sin6_addr, buf, sizeof(buf));
  }
  return buf;
}

bool wait_fd(int fd, bool for_write, Deadline deadline) {
  pollfd p{fd, static_cast<short>(for_write ? POLLOUT : POLLIN), 0};
  for (;;) {
    const int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) return false;
  }
}

Socket connect_tcp(const Endpoint& endpoint, Deadline deadline) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_NUMERICSERV;
  addrinfo* res = nullptr;
  const auto port = std::to_string(endpoint.port);
  if (const int rc = getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw NetError(NetError::Kind::ConnectFailed,
                   "resolve " + endpoint.host + ": " + gai_strerror(rc));
  }
  std::string last_error = "no addresses";
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    Socket sock(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!sock.valid()) continue;
    const int one = 1;
    setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    if (::connect(sock.fd(), ai->ai_addr, ai->ai_addrlen) != 0 && errno != EINPROGRESS) {
      last_error = std::strerror(errno);
      continue;
    }
    if (!wait_fd(sock.fd(), true, deadline)) {
      last_error = "timeout";
      continue;
    }
    int err = 0;
    socklen_t len = sizeof(err);
    getsockopt(sock.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      last_error = std::strerror(err);
      continue;
    }
    freeaddrinfo(res);
    return sock;
  }
  freeaddrinfo(res);
  throw NetError(NetError::Kind::ConnectFailed, "connect " + endpoint.to_string() + ": " + last_error);
}

Listener Listener::bind(const std::string& host, std::uint16_t port, int backlog) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE | AI_NUMERICSERV;
  addrinfo* res = nullptr;
  const auto port_text = std::to_string(port);
  if (const int rc = getaddrinfo(host.c_str(), port_text.c_str(), &hints, &res); rc != 0) {
    throw NetError(NetError::Kind::Io, "resolve " + host + ": " + gai_strerror(rc));
  }
  Socket sock(::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol));
  if (!sock.valid()) {
    freeaddrinfo(res);
    throw NetError(NetError::Kind::Io, errno_text("socket"));
  }
  const int one = 1;
  setsockopt(sock.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(sock.fd(), res->ai_addr, res->ai_addrlen) != 0) {
    const auto msg = errno_text(("bind " + host + ":" + port_text).c_str());
    freeaddrinfo(res);
    throw NetError(NetError::Kind::Io, msg);
  }
  freeaddrinfo(res);
  if (::listen(sock.fd(), backlog) != 0) throw NetError(NetError::Kind::Io, errno_text("listen"));
  Listener l;
  l.port_ = sock.local_port();
  l.host_ = host;
  l.socket_ = std::move(sock);
  return l;
}

Socket Listener::accept(Deadline deadline) {
  while (socket_.valid()) {
    const int fd = ::accept4(socket_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      const int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return Socket(fd);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    if (errno != EAGAIN && errno != EWOULDBLOCK) return {};
    if (!wait_fd(socket_.fd(), false, deadline)) return {};
  }
  return {};
}

Socket SystemDialer::connect(const Endpoint& target, Deadline deadline) const {
  return connect_tcp(target, deadline);
}

void NetworkMap::route(const Endpoint& logical, const Endpoint& actual) {
  std::unique_lock lock(mu_);
  routes_[logical] = actual;
}

void NetworkMap::unroute(const Endpoint& logical) {
  std::unique_lock lock(mu_);
  routes_.erase(logical);
}

std::optional<Endpoint> NetworkMap::lookup(const Endpoint& logical) const {
  std::shared_lock lock(mu_);
  const auto it = routes_.find(logical);
  if (it == routes_.end()) return std::nullopt;
  return it->second;
}

Socket NetworkMap::connect(const Endpoint& target, Deadline deadline) const {
  return connect_tcp(lookup(target).value_or(target), deadline);
}

std::size_t Stream::read_some(std::span<std::uint8_t> buf, Deadline deadline) {
  for (;;) {
    const auto r = try_read(buf);
    switch (r.status) {
      case IoStatus::Ok:
        return r.n;
      case IoStatus::Eof:
        return 0;
      case IoStatus::Error:
        throw NetError(NetError::Kind::Io, "read failed");
      case IoStatus::WouldBlock:
        if (!wait_fd(fd(), r.want_write, deadline)) throw NetError(NetError::Kind::Timeout, "read timeout");
        break;
    }
  }
}

void Stream::write_all(ByteView data, Deadline deadline) {
  while (!data.empty()) {
    const auto r = try_write(data);
    switch (r.status) {
      case IoStatus::Ok:
        data = data.subspan(r.n);
        break;
      case IoStatus::Eof:
        throw NetError(NetError::Kind::Closed, "peer closed");
      case IoStatus::Error:
        throw NetError(NetError::Kind::Io, "write failed");
      case IoStatus::WouldBlock:
        if (!wait_fd(fd(), r.want_write, deadline)) {
          throw NetError(NetError::Kind::Timeout, "write timeout");
        }
        break;
    }
  }
}

std::string Stream::read_to_end(Deadline deadline, std::size_t max) {
  std::string out;
  std::uint8_t buf[16384];
  while (out.size() < max) {
    const auto n = read_some(buf, deadline);
    if (n == 0) break;
    out.append(reinterpret_cast<const char*>(buf), n);
  }
  return out;
}

std::optional<std::string> Stream::read_until(std::string_view delim, std::size_t max, Deadline deadline) {
  std::string out;
  std::uint8_t c = 0;
  while (out.size() < max) {
    if (read_some({&c, 1}, deadline) == 0) return std::nullopt;
    out.push_back(static_cast<char>(c));
    if (out.size() >= delim.size() && out.compare(out.size() - delim.size(), delim.size(), delim) == 0) {
      return out;
    }
  }
  return std::nullopt;
}

IoResult PlainStream::try_read(std::span<std::uint8_t> buf) {
  for (;;) {
    const auto n = ::recv(socket_.fd(), buf.data(), buf.size(), 0);
    if (n > 0) return {IoStatus::Ok, static_cast<std::size_t>(n)};
    if (n == 0) return {IoStatus::Eof, 0};
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) return {IoStatus::WouldBlock, 0};
    if (errno == ECONNRESET) return {IoStatus::Eof, 0};
    return {IoStatus::Error, 0};
  }
}

IoResult PlainStream::try_write(ByteView data) {
  for (;;) {
    const auto n = ::send(socket_.fd(), data.data(), data.size(), MSG_NOSIGNAL);
    if (n >= 0) return {IoStatus::Ok, static_cast<std::size_t>(n)};
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) return {IoStatus::WouldBlock, 0, true};
    if (errno == EPIPE || errno == ECONNRESET) return {IoStatus::Eof, 0};
    return {IoStatus::Error, 0};
  }
}

RelayStats relay(Stream& a, Stream& b, std::chrono::milliseconds idle) {
  struct Direction {
    Stream& src;
    Stream& dst;
    std::uint64_t* counter;
    bool eof = false;
    bool want_write = false;
  };
  RelayStats stats;
  Direction dirs[2] = {{a, b, &stats.a_to_b}, {b, a, &stats.b_to_a}};
  std::vector<std::uint8_t> buf(32 * 1024);
  auto last_activity = SteadyClock::now();

  while (!(dirs[0].eof && dirs[1].eof)) {
    pollfd fds[2];
    int nfds = 0;
    int index_of[2] = {-1, -1};
    bool buffered = false;
    for (int i = 0; i < 2; ++i) {
      if (dirs[i].eof) continue;
      if (dirs[i].src.has_buffered()) buffered = true;
      index_of[i] = nfds;
      fds[nfds++] = {dirs[i].src.fd(), static_cast<short>(dirs[i].want_write ? POLLOUT : POLLIN), 0};
    }
    const auto left = idle - std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - last_activity);
    if (left.count() <= 0) break;
    const int rc = ::poll(fds, static_cast<nfds_t>(nfds), buffered ? 0 : static_cast<int>(left.count()));
    if (rc < 0 && errno != EINTR) {
      stats.error = true;
      break;
    }
    for (int i = 0; i < 2; ++i) {
      auto& d = dirs[i];
      if (d.eof) continue;
      const bool ready = index_of[i] >= 0 && (fds[index_of[i]].revents != 0);
      if (!ready && !d.src.has_buffered()) continue;
      for (int spins = 0; spins < 64; ++spins) {
        const auto r = d.src.try_read(buf);
        if (r.status == IoStatus::Ok) {
          if (!stats.first_byte) stats.first_byte = SteadyClock::now();
          *d.counter += r.n;
          last_activity = SteadyClock::now();
          try {
            d.dst.write_all(ByteView(buf.data(), r.n), deadline_in(idle));
          } catch (const NetError&) {
            stats.error = true;
            return stats;
          }
          continue;
        }
        if (r.status == IoStatus::WouldBlock) {
          d.want_write = r.want_write;
          break;
        }
        if (r.status == IoStatus::Error) stats.error = true;
        d.eof = true;
        d.dst.shutdown_write();
        last_activity = SteadyClock::now();
        break;
      }
      if (stats.error) return stats;
    }
  }
  return stats;
}

}  // namespace certwarden
