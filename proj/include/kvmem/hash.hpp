#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>

#include "kvmem/model.hpp"
#include "kvmem/optim.hpp"

namespace kvmem {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(const std::string& s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[std::size_t(i)] = digits[v & 0xf];
  return out;
}

/// Hash of the raw bytes of every parameter coordinate outside `mask`
/// (names included). Adapters are skipped unless `include_adapters`.
template <class T>
std::uint64_t unmasked_hash(const Model<T>& model, const ParamMask& mask,
                            bool include_adapters = false) {
  Fnv1a h;
  visit_params(model, [&](const std::string& name, const Tensor<T>& t, bool adapter) {
    if (adapter && !include_adapters) return;
    h.update(name);
    auto it = mask.entries.find(name);
    const auto data = t.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      if (it != mask.entries.end() && it->second[k]) continue;
      h.update(&data[k], sizeof(T));
    }
  });
  return h.digest();
}

/// Hash of every base (non-adapter) parameter byte.
template <class T>
std::uint64_t base_weight_hash(const Model<T>& model) {
  return unmasked_hash(model, ParamMask{});
}

}  // namespace kvmem
