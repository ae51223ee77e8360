// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace spt {

// FNV-1a 64-bit content hash. Used for manifest bookkeeping and frozen-weight
// checks, not for anything security-related.
class Hasher {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  template <class T>
  void update_pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    update(&v, sizeof(v));
  }
  std::uint64_t digest() const { return state_; }

  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << state_;
    return os.str();
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string content_hash(const std::string& bytes) {
  Hasher h;
  h.update(bytes);
  return h.hex();
}

inline std::string content_hash(const std::vector<unsigned char>& bytes) {
  Hasher h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

}  // namespace spt
