/*
 * Copyright (c) 2026, The nhtlab Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <sodium.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nht {

inline void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw std::runtime_error("libsodium initialisation failed");
}

using Digest = std::array<unsigned char, 32>;

/// BLAKE2b-256, keyed when `key` is non-empty. Keys outside libsodium's
/// accepted length range are first hashed down to 32 bytes.
inline Digest keyed_hash(std::span<const unsigned char> key, std::span<const unsigned char> data) {
  ensure_sodium();
  Digest out{};
  Digest folded{};
  const unsigned char* k = key.data();
  std::size_t klen = key.size();
  if (klen != 0 && (klen < crypto_generichash_KEYBYTES_MIN || klen > crypto_generichash_KEYBYTES_MAX)) {
    crypto_generichash(folded.data(), folded.size(), key.data(), key.size(), nullptr, 0);
    k = folded.data();
    klen = folded.size();
  }
  crypto_generichash(out.data(), out.size(), data.data(), data.size(), klen ? k : nullptr, klen);
  return out;
}

inline Digest hash_bytes(std::span<const unsigned char> data) { return keyed_hash({}, data); }

inline Digest hash_string(std::string_view s) {
  return hash_bytes({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

inline std::span<const unsigned char> as_bytes(std::span<const double> v) {
  return {reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double)};
}

inline std::string to_hex(std::span<const unsigned char> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

inline std::uint64_t load_u64(std::span<const unsigned char> bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8 && i < bytes.size(); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

/// Digest of a query row as hex (first 16 bytes).
inline std::string query_digest(std::span<const double> query) {
  const auto h = hash_bytes(as_bytes(query));
  return to_hex(std::span(h).first(16));
}

inline std::vector<unsigned char> key_from_string(std::string_view s) { return {s.begin(), s.end()}; }

}  // namespace nht
