#include <gtest/gtest.h>

#include "certwarden/bytes.hpp"

using namespace certwarden;

TEST(Base64, KnownVectors) {
  EXPECT_EQ(base64_encode(as_bytes("")), "");
  EXPECT_EQ(base64_encode(as_bytes("f")), "Zg==");
  EXPECT_EQ(base64_encode(as_bytes("fo")), "Zm8=");
  EXPECT_EQ(base64_encode(as_bytes("foo")), "Zm9v");
  EXPECT_EQ(base64_encode(as_bytes("foobar")), "Zm9vYmFy");
  const Bytes high{0xfb, 0xff, 0xfe};
  EXPECT_EQ(base64_encode(high), "+//+");
}

TEST(Base64, StrictDecoder) {
  EXPECT_EQ(to_string(*base64_decode("Zm9vYmFy")), "foobar");
  EXPECT_EQ(to_string(*base64_decode("Zg==")), "f");
  EXPECT_FALSE(base64_decode("Zg="));
  EXPECT_FALSE(base64_decode("Zg=a"));
  EXPECT_FALSE(base64_decode("Z==="));
  EXPECT_FALSE(base64_decode("Zm9v\n"));
  EXPECT_FALSE(base64_decode("Zm-v"));
}

TEST(Hex, RoundTripAndRejects) {
  const Bytes b{0x00, 0x7f, 0xab};
  EXPECT_EQ(hex_encode(b), "007fab");
  EXPECT_EQ(*hex_decode("007FAB"), b);
  EXPECT_FALSE(hex_decode("abc"));
  EXPECT_FALSE(hex_decode("zz"));
}

TEST(Url, EncodeDecode) {
  EXPECT_EQ(url_encode("https://a.test/x?y=1&z"), "https%3A%2F%2Fa.test%2Fx%3Fy%3D1%26z");
  EXPECT_EQ(*url_decode("a%20b+c"), "a b c");
  EXPECT_FALSE(url_decode("%zz"));
  EXPECT_FALSE(url_decode("%4"));
}

TEST(SecureEqual, ComparesLengthAndContent) {
  EXPECT_TRUE(secure_equal(as_bytes("abc"), as_bytes("abc")));
  EXPECT_FALSE(secure_equal(as_bytes("abc"), as_bytes("abd")));
  EXPECT_FALSE(secure_equal(as_bytes("abc"), as_bytes("ab")));
}
