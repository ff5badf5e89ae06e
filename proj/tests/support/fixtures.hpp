#pragma once

// Helpers shared by the unit tests and the acceptance runner. No test
// framework dependency.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <sys/types.h>
#include <vector>

#include "certwarden/cert_authority.hpp"
#include "certwarden/client_ident.hpp"
#include "certwarden/net.hpp"

namespace cwtest {

using certwarden::Bytes;

/// Unique directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Random certificate chains over a small pool of CA hierarchies: a root,
/// up to three intermediates below it, and a fresh leaf per chain.
class ChainFactory {
 public:
  explicit ChainFactory(std::uint64_t seed, std::size_t roots = 3);

  /// Leaf first, issuer-linked, root last with probability 1/2.
  std::vector<Bytes> random_chain();
  std::mt19937_64& rng() { return rng_; }

 private:
  struct Path {
    std::vector<certwarden::CertAuthority> cas;  // root first
  };
  std::mt19937_64 rng_;
  std::vector<Path> paths_;
  std::uint64_t leaves_ = 0;
};

Bytes read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const Bytes& data);
void flip_bit(Bytes& data, std::size_t bit);

certwarden::SocketRow random_row(std::mt19937_64& rng);

/// A child process named `name` holding one TCP connection to `target`.
/// The connection stays open until the object is destroyed.
class HelperProcess {
 public:
  HelperProcess(const std::string& name, const certwarden::Endpoint& target);
  ~HelperProcess();
  HelperProcess(const HelperProcess&) = delete;
  HelperProcess& operator=(const HelperProcess&) = delete;
  pid_t pid() const { return pid_; }

 private:
  pid_t pid_ = -1;
  int release_fd_ = -1;
};

/// Accepted-and-connected loopback pair: {client side, server side}.
std::pair<certwarden::Socket, certwarden::Socket> loopback_pair();

}  // namespace cwtest
