#include "certwarden/whitelist_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/evp.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "certwarden/ossl.hpp"
#include "json.hpp"

namespace certwarden {

namespace {

constexpr char kMagic[4] = {'C', 'W', 'W', 'L'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kNonceSize = 12;
constexpr std::size_t kTagSize = 16;
constexpr std::size_t kHeaderSize = sizeof(kMagic) + 1 + kNonceSize;

nlohmann::json to_json(const WhitelistEntry& e) {
  return {{"name", e.descriptor.name},           {"version", e.descriptor.version},
          {"first_url", e.descriptor.first_url}, {"inserted_at", e.inserted_at},
          {"enforce_anyway", e.enforce_anyway}};
}

WhitelistEntry from_json(const nlohmann::json& j) {
  WhitelistEntry e;
  e.descriptor.name = j.at("name").get<std::string>();
  e.descriptor.version = j.at("version").get<std::string>();
  e.descriptor.first_url = j.at("first_url").get<std::string>();
  e.inserted_at = j.at("inserted_at").get<std::int64_t>();
  e.enforce_anyway = j.at("enforce_anyway").get<bool>();
  return e;
}

void write_file_atomically(const std::filesystem::path& path, ByteView bytes) {
  auto tmp = path;
  tmp += ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
  if (fd < 0) throw StoreWriteError("cannot create " + tmp.string());
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n <= 0) {
      ::close(fd);
      std::filesystem::remove(tmp);
      throw StoreWriteError("write failed for " + tmp.string());
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    std::filesystem::remove(tmp);
    throw StoreWriteError("fsync failed for " + tmp.string());
  }
  ::close(fd);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw StoreWriteError("rename to " + path.string() + " failed: " + ec.message());
  }
}

}  // namespace

Bytes WhitelistStore::encode(const Snapshot& entries, ByteView key) {
  if (key.size() != kStoreKeySize) throw std::invalid_argument("store key must be 32 bytes");
  auto arr = nlohmann::json::array();
  for (const auto& [k, e] : entries) arr.push_back(to_json(e));
  const std::string plain = arr.dump();

  Bytes out(kMagic, kMagic + sizeof(kMagic));
  out.push_back(kVersion);
  const Bytes nonce = random_bytes(kNonceSize);
  out.insert(out.end(), nonce.begin(), nonce.end());

  CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  int len = 0;
  if (!ctx || EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(kNonceSize), nullptr) != 1 ||
      EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1 ||
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, out.data(), static_cast<int>(kHeaderSize)) != 1) {
    throw_crypto_error("store encrypt init");
  }
  Bytes cipher(plain.size() + 16);
  if (EVP_EncryptUpdate(ctx.get(), cipher.data(), &len, reinterpret_cast<const unsigned char*>(plain.data()),
                        static_cast<int>(plain.size())) != 1) {
    throw_crypto_error("store encrypt");
  }
  int total = len;
  if (EVP_EncryptFinal_ex(ctx.get(), cipher.data() + total, &len) != 1) throw_crypto_error("store encrypt final");
  total += len;
  cipher.resize(static_cast<std::size_t>(total));
  Bytes tag(kTagSize);
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, static_cast<int>(kTagSize), tag.data()) != 1) {
    throw_crypto_error("store tag");
  }
  out.insert(out.end(), cipher.begin(), cipher.end());
  out.insert(out.end(), tag.begin(), tag.end());
  return out;
}

WhitelistStore::Snapshot WhitelistStore::decode(ByteView bytes, ByteView key) {
  if (key.size() != kStoreKeySize) throw std::invalid_argument("store key must be 32 bytes");
  if (bytes.size() < kHeaderSize + kTagSize) throw StoreTamperedError("store tampered: file too short");
  if (!std::equal(kMagic, kMagic + sizeof(kMagic), bytes.begin())) {
    throw StoreTamperedError("store tampered: bad magic");
  }
  if (bytes[sizeof(kMagic)] != kVersion) throw StoreTamperedError("store tampered: unknown version");

  const auto nonce = bytes.subspan(sizeof(kMagic) + 1, kNonceSize);
  const auto cipher = bytes.subspan(kHeaderSize, bytes.size() - kHeaderSize - kTagSize);
  Bytes tag(bytes.end() - kTagSize, bytes.end());

  CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  int len = 0;
  if (!ctx || EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(kNonceSize), nullptr) != 1 ||
      EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1 ||
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, bytes.data(), static_cast<int>(kHeaderSize)) != 1) {
    throw_crypto_error("store decrypt init");
  }
  Bytes plain(cipher.size() + 16);
  if (EVP_DecryptUpdate(ctx.get(), plain.data(), &len, cipher.data(), static_cast<int>(cipher.size())) != 1) {
    ERR_clear_error();
    throw StoreTamperedError("store tampered: decrypt failed");
  }
  int total = len;
  EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, static_cast<int>(kTagSize), tag.data());
  if (EVP_DecryptFinal_ex(ctx.get(), plain.data() + total, &len) != 1) {
    ERR_clear_error();
    throw StoreTamperedError("store tampered: authentication failed");
  }
  total += len;
  plain.resize(static_cast<std::size_t>(total));

  Snapshot out;
  try {
    const auto doc = nlohmann::json::parse(plain.begin(), plain.end());
    for (const auto& item : doc) {
      auto e = from_json(item);
      if (e.descriptor.name.empty()) throw StoreTamperedError("store tampered: empty client name");
      out[{e.descriptor.name, e.descriptor.version}] = std::move(e);
    }
  } catch (const nlohmann::json::exception& ex) {
    // Authenticated but malformed means the writer was not us.
    throw StoreTamperedError(std::string("store tampered: ") + ex.what());
  }
  return out;
}

WhitelistStore::WhitelistStore(std::filesystem::path path, Bytes key, Snapshot initial)
    : path_(std::move(path)), key_(std::move(key)), current_(std::make_shared<const Snapshot>(std::move(initial))) {}

std::shared_ptr<WhitelistStore> WhitelistStore::open(const std::filesystem::path& path, ByteView key) {
  if (key.size() != kStoreKeySize) throw std::invalid_argument("store key must be 32 bytes");
  Snapshot initial;
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreWriteError("cannot read " + path.string());
    Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    initial = decode(bytes, key);
  }
  return std::shared_ptr<WhitelistStore>(new WhitelistStore(path, Bytes(key.begin(), key.end()), std::move(initial)));
}

std::shared_ptr<WhitelistStore> WhitelistStore::in_memory() {
  return std::shared_ptr<WhitelistStore>(new WhitelistStore({}, {}, {}));
}

std::shared_ptr<const WhitelistStore::Snapshot> WhitelistStore::snapshot() const {
  std::lock_guard lock(snapshot_mu_);
  return current_;
}

std::optional<WhitelistEntry> WhitelistStore::lookup(const std::string& name, const std::string& version) const {
  const auto snap = snapshot();
  const auto it = snap->find({name, version});
  if (it == snap->end()) return std::nullopt;
  return it->second;
}

void WhitelistStore::commit(Snapshot next) {
  if (!path_.empty()) write_file_atomically(path_, encode(next, key_));
  auto published = std::make_shared<const Snapshot>(std::move(next));
  std::lock_guard lock(snapshot_mu_);
  current_ = std::move(published);
}

void WhitelistStore::insert(const WhitelistEntry& entry) {
  if (entry.descriptor.name.empty()) throw std::invalid_argument("client name must be non-empty");
  std::lock_guard writer(writer_mu_);
  const auto snap = snapshot();
  const auto it = snap->find({entry.descriptor.name, entry.descriptor.version});
  if (it != snap->end() && it->second == entry) return;
  Snapshot next = *snap;
  next[{entry.descriptor.name, entry.descriptor.version}] = entry;
  commit(std::move(next));
}

bool WhitelistStore::remove(const std::string& name, const std::string& version) {
  std::lock_guard writer(writer_mu_);
  const auto snap = snapshot();
  if (snap->find({name, version}) == snap->end()) return false;
  Snapshot next = *snap;
  next.erase({name, version});
  commit(std::move(next));
  return true;
}

bool WhitelistStore::set_enforce_anyway(const std::string& name, const std::string& version, bool value) {
  std::lock_guard writer(writer_mu_);
  const auto snap = snapshot();
  const auto it = snap->find({name, version});
  if (it == snap->end()) return false;
  if (it->second.enforce_anyway == value) return true;
  Snapshot next = *snap;
  next[{name, version}].enforce_anyway = value;
  commit(std::move(next));
  return true;
}

std::vector<WhitelistEntry> WhitelistStore::list() const {
  std::vector<WhitelistEntry> out;
  for (const auto& [k, e] : *snapshot()) out.push_back(e);
  return out;
}

std::size_t WhitelistStore::size() const { return snapshot()->size(); }

std::optional<Bytes> parse_store_key(std::string_view text) {
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
  auto key = hex_decode(text);
  if (!key || key->size() != kStoreKeySize) return std::nullopt;
  return key;
}

}  // namespace certwarden
