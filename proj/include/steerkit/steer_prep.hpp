#pragma once

// Offline preparation of per-user steering dictionaries: contrastive prompt
// pairs, teacher-forced sub-layer taps, and keyed deltas.

#include <cstdint>
#include <string>
#include <vector>

#include "steerkit/corpus.hpp"
#include "steerkit/encode.hpp"
#include "steerkit/tiny_lm.hpp"

namespace steerkit {

struct ContrastivePair {
  std::uint32_t pair_id = 0;
  RecordId record_id = 0;
  std::int64_t source_ts = 0;
  std::string query;
  std::string answer;
  std::string positive_text;  // personal context + query + gold answer
  std::string negative_text;  // other-user context + query + gold answer
  int neg_index = 0;
  std::vector<RecordId> positive_sources;
  std::vector<RecordId> negative_sources;
};

/// "{context}\nQ: {query}\nA: {answer}"; the leading "{context}\n" is omitted
/// when the context is empty.
std::string render_teacher_forced(std::string_view context, std::string_view query, std::string_view answer);

inline constexpr int kDefaultNegatives = 4;

/// One positive context (BM25 over the user's other train records) shared by
/// `n_negatives` pairs whose negatives use seeds seed + i.
std::vector<ContrastivePair> build_contrastive_pairs(const InteractionRecord& record, const UserCorpus& corpus,
                                                     int n_negatives, std::uint64_t seed,
                                                     int context_records = kDefaultContextRecords);

struct SteeringEntry {
  std::uint32_t pair_id = 0;
  std::int64_t source_ts = 0;
  KeyVector key;
  std::vector<float> delta_attn;
  std::vector<float> delta_mlp;
  std::vector<float> delta_whole;

  bool operator==(const SteeringEntry&) const = default;
};

struct SteeringDict {
  std::string user_id;
  ModelFingerprint fingerprint{};
  int layer = 0;
  int d_model = 0;
  int key_dim = 0;
  std::vector<SteeringEntry> entries;  // ordered by (source_ts, pair_id)

  bool operator==(const SteeringDict&) const = default;
};

/// Differences of the last-position taps of the positive and negative texts
/// at hook.layer. Keyed by encoder(positive ‖ kPairSeparator ‖ negative).
/// Throws SequenceLengthError when either text exceeds the context.
SteeringEntry extract_deltas(const ContrastivePair& pair, const TinyLm& model, const HookConfig& hook,
                             const KeyEncoder& encoder = KeyEncoder::hashed());

struct PrepConfig {
  int n_negatives = kDefaultNegatives;
  int context_records = kDefaultContextRecords;
  std::uint64_t seed = 0;
  KeyEncoder encoder = KeyEncoder::hashed();
};

struct BuildReport {
  int records = 0;
  int pairs = 0;
  int skipped = 0;
  std::vector<std::string> warnings;
};

/// Builds S_u over the user's train records in time order. Record r draws its
/// negatives from seed mix_seed(config.seed, r.id). Pairs that overflow the
/// model context are skipped and reported.
SteeringDict build_dict(std::string_view user, const UserCorpus& corpus, const TinyLm& model, const HookConfig& hook,
                        const PrepConfig& config = {}, BuildReport* report = nullptr);

/// build_dict at several layers from one set of forward passes; element i is
/// the dictionary for layers[i] and equals build_dict at that layer.
std::vector<SteeringDict> build_dicts(std::string_view user, const UserCorpus& corpus, const TinyLm& model,
                                      const std::vector<int>& layers, const PrepConfig& config = {},
                                      BuildReport* report = nullptr);

}  // namespace steerkit
