#pragma once

#include <cstdint>
#include <cstring>
#include <string>

namespace nseg {

// FNV-1a 64-bit content fingerprint. Used to detect any byte-level change in
// parameter sets (frozen-backbone and zero-shot contracts); not cryptographic.
class Fingerprint {
 public:
  void update(const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ull;
    }
  }

  void update(const std::string& s) { update(s.data(), s.size()); }

  void update_double(const double* v, size_t n) { update(v, n * sizeof(double)); }

  uint64_t value() const { return h_; }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    uint64_t v = h_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<size_t>(i)] = digits[v & 0xF];
      v >>= 4;
    }
    return out;
  }

 private:
  uint64_t h_ = 0xCBF29CE484222325ull;
};

}  // namespace nseg
