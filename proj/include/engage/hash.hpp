#pragma once

#include <cstdint>
#include <string_view>

namespace engage {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) noexcept {
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t fnv1a_byte(unsigned char c, std::uint64_t h) noexcept {
  return (h ^ c) * kFnvPrime;
}

}  // namespace engage
