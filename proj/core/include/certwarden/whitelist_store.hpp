#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "certwarden/bytes.hpp"

namespace certwarden {

/// Identity of the program behind a flow. Keyed on (name, version);
/// first_url is metadata.
struct ClientDescriptor {
  std::string name;
  std::string version;
  std::string first_url;

  friend bool operator==(const ClientDescriptor&, const ClientDescriptor&) = default;
};

struct WhitelistEntry {
  ClientDescriptor descriptor;
  std::int64_t inserted_at = 0;  // unix seconds
  bool enforce_anyway = false;

  friend bool operator==(const WhitelistEntry&, const WhitelistEntry&) = default;
};

/// Authentication failure, wrong key, or a file that is not a store.
class StoreTamperedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StoreWriteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::size_t kStoreKeySize = 32;

/// AES-256-GCM encrypted whitelist. File layout: "CWWL", version byte (1),
/// 12-byte nonce, ciphertext of a JSON entry array, 16-byte tag. The header
/// is bound as associated data.
///
/// Readers see immutable snapshots; writers are serialized, persist with
/// write-temp-then-rename, and publish only after the rename succeeds.
class WhitelistStore {
 public:
  using Key = std::pair<std::string, std::string>;
  using Snapshot = std::map<Key, WhitelistEntry>;

  /// Absent file yields an empty store. Throws StoreTamperedError.
  static std::shared_ptr<WhitelistStore> open(const std::filesystem::path& path, ByteView key);
  /// Memory-only store (no persistence).
  static std::shared_ptr<WhitelistStore> in_memory();

  std::optional<WhitelistEntry> lookup(const std::string& name, const std::string& version) const;
  /// Idempotent upsert. Throws StoreWriteError; the store is unchanged then.
  void insert(const WhitelistEntry& entry);
  bool remove(const std::string& name, const std::string& version);
  bool set_enforce_anyway(const std::string& name, const std::string& version, bool value);
  std::vector<WhitelistEntry> list() const;
  std::size_t size() const;
  std::shared_ptr<const Snapshot> snapshot() const;

  const std::filesystem::path& path() const { return path_; }

  static Bytes encode(const Snapshot& entries, ByteView key);
  /// Throws StoreTamperedError.
  static Snapshot decode(ByteView file_bytes, ByteView key);

 private:
  WhitelistStore(std::filesystem::path path, Bytes key, Snapshot initial);
  void commit(Snapshot next);

  std::filesystem::path path_;
  Bytes key_;
  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const Snapshot> current_;
  std::mutex writer_mu_;
};

/// Reads a 32-byte key given as 64 hex characters (file contents or
/// environment value, surrounding whitespace ignored). nullopt if malformed.
std::optional<Bytes> parse_store_key(std::string_view text);

}  // namespace certwarden
