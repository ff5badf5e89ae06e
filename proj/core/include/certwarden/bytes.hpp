#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace certwarden {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline ByteView as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string to_string(ByteView b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

/// Standard alphabet, with padding.
std::string base64_encode(ByteView data);

/// Strict decoder: rejects bad length, bad characters and misplaced padding.
std::optional<Bytes> base64_decode(std::string_view text);

std::string hex_encode(ByteView data);
std::optional<Bytes> hex_decode(std::string_view text);

/// Percent-encodes everything outside the RFC 3986 unreserved set.
std::string url_encode(std::string_view s);
std::optional<std::string> url_decode(std::string_view s);

/// Constant-time equality for MAC/tag comparison.
bool secure_equal(ByteView a, ByteView b);

}  // namespace certwarden
