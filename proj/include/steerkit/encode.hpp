#pragma once

// Sequence encoders used for steering-dictionary keys and query matching.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

class TinyLm;

inline constexpr int kDefaultKeyDim = 256;

/// Joins the positive and negative prompt texts before keying a pair.
inline constexpr std::string_view kPairSeparator = "\n###\n";

/// L2-normalized key, or all zeros for empty input.
struct KeyVector {
  std::vector<float> values;

  int dim() const { return static_cast<int>(values.size()); }
  bool operator==(const KeyVector&) const = default;
};

/// Splits text into characters (UTF-8 code point byte runs; an invalid byte
/// counts as one character) with ASCII letters lowercased.
std::vector<std::string> lowercase_chars(std::string_view text);

/// Bucket of one gram: FNV-1a 32 of its UTF-8 bytes modulo key_dim.
std::uint32_t gram_bucket(std::string_view gram, int key_dim);

/// Hashed character 3-gram frequency vector, L2-normalized. Texts shorter than
/// three characters form a single gram. Requires key_dim >= 16.
KeyVector encode_text(std::string_view text, int key_dim = kDefaultKeyDim);

/// Mean of the block-exit residual over every position at `layer`,
/// L2-normalized; key_dim equals d_model.
KeyVector encode_with_model(std::string_view text, const TinyLm& model, int layer);

/// 1 - cos(a, b), clamped to [0, 2]. Returns 1 when either vector is zero.
double cosine_distance(std::span<const float> a, std::span<const float> b);
inline double cosine_distance(const KeyVector& a, const KeyVector& b) {
  return cosine_distance(a.values, b.values);
}

/// Selects which encoder produces keys. Dictionaries and queries must use the
/// same one.
struct KeyEncoder {
  enum class Kind { kHashedTrigram, kModel };

  Kind kind = Kind::kHashedTrigram;
  int key_dim = kDefaultKeyDim;
  const TinyLm* model = nullptr;
  int layer = 0;

  static KeyEncoder hashed(int key_dim = kDefaultKeyDim) { return {Kind::kHashedTrigram, key_dim, nullptr, 0}; }
  static KeyEncoder with_model(const TinyLm& model, int layer);

  KeyVector encode(std::string_view text) const;
  int dim() const;
};

}  // namespace steerkit
