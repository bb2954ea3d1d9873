#pragma once

// Little-endian primitives shared by the TLMW and FNTS file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace steerkit::io {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }

  const std::string& data() const { return buf_; }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

/// Bounds-checked reader; every accessor returns false instead of reading past
/// the end.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t offset() const { return pos_; }

  bool u32(std::uint32_t& out) { return get_le(out); }
  bool i64(std::int64_t& out) {
    std::uint64_t v;
    if (!get_le(v)) return false;
    out = static_cast<std::int64_t>(v);
    return true;
  }
  bool f32(float& out) {
    std::uint32_t v;
    if (!get_le(v)) return false;
    out = std::bit_cast<float>(v);
    return true;
  }
  bool bytes(void* dst, std::size_t n) {
    if (remaining() < n) return false;
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
    return true;
  }
  bool f32s(std::vector<float>& out, std::size_t n) {
    if (remaining() / 4 < n) return false;
    out.resize(n);
    for (auto& x : out) f32(x);
    return true;
  }

 private:
  template <typename T>
  bool get_le(T& out) {
    if (remaining() < sizeof(T)) return false;
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    out = v;
    return true;
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace steerkit::io
