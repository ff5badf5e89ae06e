#include "fixtures.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include "certwarden/ossl.hpp"

namespace cwtest {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

TempDir::TempDir() {
  std::random_device rd;
  for (int attempt = 0; attempt < 16; ++attempt) {
    auto p = fs::temp_directory_path() / ("certwarden-test-" + std::to_string(rd()));
    if (fs::create_directory(p)) {
      path_ = p;
      return;
    }
  }
  throw std::runtime_error("cannot create a temp dir");
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

ChainFactory::ChainFactory(std::uint64_t seed, std::size_t roots) : rng_(seed) {
  for (std::size_t r = 0; r < roots; ++r) {
    certwarden::CaOptions o;
    o.common_name = "Pool Root " + std::to_string(r);
    o.organization = "Pool";
    o.seed = seed + r;
    Path p;
    p.cas.push_back(certwarden::CertAuthority::generate(o));
    for (int depth = 1; depth <= 3; ++depth) {
      p.cas.push_back(p.cas.back().issue_subordinate("Pool " + std::to_string(r) + " Tier " + std::to_string(depth), 365));
    }
    paths_.push_back(std::move(p));
  }
}

std::vector<Bytes> ChainFactory::random_chain() {
  const auto& path = paths_[rng_() % paths_.size()];
  // Issuer depth 0 means the leaf is signed directly by the root.
  const std::size_t depth = rng_() % path.cas.size();
  const auto& issuer = path.cas[depth];
  const auto leaf = issuer.forge_leaf("h" + std::to_string(leaves_++) + ".pool.test");
  std::vector<Bytes> out{certwarden::x509_to_der(leaf.certificate.get())};
  for (std::size_t i = depth; i > 0; --i) out.push_back(certwarden::x509_to_der(path.cas[i].certificate()));
  if (rng_() % 2 == 0) out.push_back(certwarden::x509_to_der(path.cas[0].certificate()));
  return out;
}

Bytes read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, const Bytes& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

void flip_bit(Bytes& data, std::size_t bit) { data.at(bit / 8) ^= static_cast<std::uint8_t>(1u << (bit % 8)); }

certwarden::SocketRow random_row(std::mt19937_64& rng) {
  certwarden::SocketRow r;
  char addr[9];
  std::snprintf(addr, sizeof addr, "%08X", static_cast<unsigned>(rng()));
  r.local_address = addr;
  std::snprintf(addr, sizeof addr, "%08X", static_cast<unsigned>(rng()));
  r.remote_address = addr;
  r.local_port = static_cast<std::uint16_t>(rng() % 65535 + 1);
  r.remote_port = static_cast<std::uint16_t>(rng() % 65536);
  r.state = static_cast<std::uint8_t>(rng() % 11 + 1);
  r.uid = static_cast<std::uint32_t>(rng() % 70000);
  r.inode = rng() % 100000000000ULL;
  return r;
}

HelperProcess::HelperProcess(const std::string& name, const certwarden::Endpoint& target) {
  int release[2];
  int ready[2];
  if (::pipe(release) != 0 || ::pipe(ready) != 0) throw std::runtime_error("pipe failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(target.port);
  ::inet_pton(AF_INET, target.host.c_str(), &addr.sin_addr);
  char comm[16] = {};
  name.copy(comm, sizeof comm - 1);

  pid_ = ::fork();
  if (pid_ < 0) throw std::runtime_error("fork failed");
  if (pid_ == 0) {
    // Only async-signal-safe calls from here on.
    ::close(release[1]);
    ::close(ready[0]);
    ::prctl(PR_SET_NAME, comm, 0, 0, 0);
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    char ok = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0 ? 1 : 0;
    (void)!::write(ready[1], &ok, 1);
    char byte;
    (void)!::read(release[0], &byte, 1);
    ::_exit(0);
  }
  ::close(release[0]);
  ::close(ready[1]);
  release_fd_ = release[1];
  char ok = 0;
  const auto n = ::read(ready[0], &ok, 1);
  ::close(ready[0]);
  if (n != 1 || ok != 1) throw std::runtime_error("helper could not connect");
}

HelperProcess::~HelperProcess() {
  if (release_fd_ >= 0) ::close(release_fd_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

std::pair<certwarden::Socket, certwarden::Socket> loopback_pair() {
  auto listener = certwarden::Listener::bind("127.0.0.1", 0);
  auto client = certwarden::connect_tcp(listener.endpoint(), certwarden::deadline_in(5s));
  auto server = listener.accept(certwarden::deadline_in(5s));
  if (!server.valid()) throw std::runtime_error("accept failed");
  return {std::move(client), std::move(server)};
}

}  // namespace cwtest
