#pragma once

// FNTS: versioned little-endian persistence for steering dictionaries.
//
//   header:  "FNTS" | u32 version=1 | u32 d_model | u32 key_dim | u32 layer |
//            u32 n_entries | 16-byte model fingerprint |
//            u32 user_id length | user_id bytes (UTF-8)
//   entry:   u32 pair_id | i64 source_ts | key (key_dim x f32) |
//            delta_attn | delta_mlp | delta_whole (each d_model x f32)

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "steerkit/error.hpp"
#include "steerkit/steer_prep.hpp"

namespace steerkit {

inline constexpr std::uint32_t kStoreVersion = 1;

class StoreError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kVersionMismatch, kTruncated, kCorrupt, kHeaderOverflow };

  StoreError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Canonical byte image of a dictionary.
std::string serialize_dict(const SteeringDict& dict);
SteeringDict deserialize_dict(const std::string& bytes);

/// Writes atomically (temp file + rename).
void save_dict(const SteeringDict& dict, const std::filesystem::path& path);

struct LoadedDict {
  SteeringDict dict;
  /// Non-fatal findings, e.g. a fingerprint that differs from the serving model.
  std::vector<std::string> warnings;
};

/// Validates magic, version, and counts. When `expected` is given and differs
/// from the stored fingerprint the dict still loads, with a warning.
LoadedDict load_dict(const std::filesystem::path& path, const std::optional<ModelFingerprint>& expected = {});

/// "<dir>/<user_id>.fnts" with path-hostile characters replaced by '_'.
std::filesystem::path dict_path(const std::filesystem::path& dir, std::string_view user_id);

}  // namespace steerkit
