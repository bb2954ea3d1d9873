#pragma once

#include <cstdint>
#include <string_view>

namespace steerkit {

inline constexpr std::uint32_t kFnv32Offset = 2166136261u;
inline constexpr std::uint32_t kFnv32Prime = 16777619u;
inline constexpr std::uint64_t kFnv64Offset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnv64Prime = 1099511628211ULL;

/// 32-bit FNV-1a over raw bytes.
constexpr std::uint32_t fnv1a32(std::string_view bytes, std::uint32_t h = kFnv32Offset) {
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= kFnv32Prime;
  }
  return h;
}

/// Incremental 64-bit FNV-1a.
class Fnv1a64 {
 public:
  explicit Fnv1a64(std::uint64_t basis = kFnv64Offset) : h_(basis) {}

  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= kFnv64Prime;
    }
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_;
};

}  // namespace steerkit
