#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace copyattack {

/// 64-bit FNV-1a. Used for dataset/config fingerprints and checkpoint checksums.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.hex();
}

}  // namespace copyattack
