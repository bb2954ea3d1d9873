#include "steerkit/steer_store.hpp"

#include <cstring>
#include <limits>

#include "steerkit/binary_io.hpp"

namespace steerkit {

namespace {

constexpr char kMagic[4] = {'F', 'N', 'T', 'S'};
constexpr std::uint64_t kU32Max = std::numeric_limits<std::uint32_t>::max();

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > kU32Max) throw StoreError(StoreError::Kind::kHeaderOverflow, std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

void check_len(const std::vector<float>& v, int n, std::uint32_t pair_id, const char* what) {
  if (v.size() != static_cast<std::size_t>(n)) {
    throw StoreError(StoreError::Kind::kCorrupt, std::string(what) + " of pair " + std::to_string(pair_id) +
                                                     " has length " + std::to_string(v.size()) + ", expected " +
                                                     std::to_string(n));
  }
}

}  // namespace

std::string serialize_dict(const SteeringDict& dict) {
  if (dict.layer < 0 || dict.d_model < 0 || dict.key_dim < 0) {
    throw StoreError(StoreError::Kind::kHeaderOverflow, "negative header field");
  }
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kStoreVersion);
  w.u32(checked_u32(static_cast<std::size_t>(dict.d_model), "d_model"));
  w.u32(checked_u32(static_cast<std::size_t>(dict.key_dim), "key_dim"));
  w.u32(checked_u32(static_cast<std::size_t>(dict.layer), "layer"));
  w.u32(checked_u32(dict.entries.size(), "n_entries"));
  w.bytes(dict.fingerprint.data(), dict.fingerprint.size());
  w.u32(checked_u32(dict.user_id.size(), "user_id length"));
  w.bytes(dict.user_id.data(), dict.user_id.size());
  for (const auto& e : dict.entries) {
    check_len(e.key.values, dict.key_dim, e.pair_id, "key");
    check_len(e.delta_attn, dict.d_model, e.pair_id, "delta_attn");
    check_len(e.delta_mlp, dict.d_model, e.pair_id, "delta_mlp");
    check_len(e.delta_whole, dict.d_model, e.pair_id, "delta_whole");
    w.u32(e.pair_id);
    w.i64(e.source_ts);
    w.f32s(e.key.values);
    w.f32s(e.delta_attn);
    w.f32s(e.delta_mlp);
    w.f32s(e.delta_whole);
  }
  return w.data();
}

SteeringDict deserialize_dict(const std::string& bytes) {
  io::ByteReader r(bytes);
  char magic[4];
  if (!r.bytes(magic, 4)) throw StoreError(StoreError::Kind::kTruncated, "truncated header: missing magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw StoreError(StoreError::Kind::kBadMagic, "bad magic '" + std::string(magic, 4) + "', expected 'FNTS'");
  }
  std::uint32_t version = 0, d_model = 0, key_dim = 0, layer = 0, n_entries = 0, user_len = 0;
  if (!r.u32(version)) throw StoreError(StoreError::Kind::kTruncated, "truncated header");
  if (version != kStoreVersion) {
    throw StoreError(StoreError::Kind::kVersionMismatch,
                     "unsupported FNTS version " + std::to_string(version) + " (expected 1)");
  }
  SteeringDict dict;
  if (!r.u32(d_model) || !r.u32(key_dim) || !r.u32(layer) || !r.u32(n_entries) ||
      !r.bytes(dict.fingerprint.data(), dict.fingerprint.size()) || !r.u32(user_len)) {
    throw StoreError(StoreError::Kind::kTruncated, "truncated header");
  }
  if (d_model > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
      key_dim > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
      layer > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
    throw StoreError(StoreError::Kind::kCorrupt, "header field out of range");
  }
  dict.user_id.resize(user_len);
  if (!r.bytes(dict.user_id.data(), user_len)) throw StoreError(StoreError::Kind::kTruncated, "truncated user_id");
  dict.d_model = static_cast<int>(d_model);
  dict.key_dim = static_cast<int>(key_dim);
  dict.layer = static_cast<int>(layer);
  const std::size_t entry_bytes = 4 + 8 + 4 * (static_cast<std::size_t>(key_dim) + 3 * d_model);
  if (r.remaining() / entry_bytes < n_entries) {
    const std::size_t complete = r.remaining() / entry_bytes;
    throw StoreError(StoreError::Kind::kTruncated, "truncated at entry " + std::to_string(complete) + " of " +
                                                       std::to_string(n_entries));
  }
  dict.entries.resize(n_entries);
  for (auto& e : dict.entries) {
    r.u32(e.pair_id);
    r.i64(e.source_ts);
    r.f32s(e.key.values, key_dim);
    r.f32s(e.delta_attn, d_model);
    r.f32s(e.delta_mlp, d_model);
    r.f32s(e.delta_whole, d_model);
  }
  if (r.remaining() != 0) {
    throw StoreError(StoreError::Kind::kCorrupt,
                     std::to_string(r.remaining()) + " trailing bytes after " + std::to_string(n_entries) + " entries");
  }
  return dict;
}

void save_dict(const SteeringDict& dict, const std::filesystem::path& path) {
  const std::string bytes = serialize_dict(dict);
  try {
    io::write_file_atomic(path.string(), bytes);
  } catch (const Error& e) {
    throw StoreError(StoreError::Kind::kIo, e.what());
  }
}

LoadedDict load_dict(const std::filesystem::path& path, const std::optional<ModelFingerprint>& expected) {
  std::string bytes;
  try {
    bytes = io::read_file(path.string());
  } catch (const Error& e) {
    throw StoreError(StoreError::Kind::kIo, e.what());
  }
  LoadedDict out;
  try {
    out.dict = deserialize_dict(bytes);
  } catch (const StoreError& e) {
    throw StoreError(e.kind(), path.string() + ": " + e.what());
  }
  if (expected && *expected != out.dict.fingerprint) {
    out.warnings.push_back("model fingerprint mismatch: dict built for " + to_hex(out.dict.fingerprint) +
                           ", serving model is " + to_hex(*expected));
  }
  return out;
}

std::filesystem::path dict_path(const std::filesystem::path& dir, std::string_view user_id) {
  std::string name;
  for (char c : user_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '_' || c == '.';
    name.push_back(ok ? c : '_');
  }
  if (name.empty() || name == "." || name == "..") name = "_" + name;
  return dir / (name + ".fnts");
}

}  // namespace steerkit
