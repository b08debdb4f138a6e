#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace cade {

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
inline std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 0xF];
  return out;
}

}  // namespace cade
