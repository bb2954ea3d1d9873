#pragma once

// Query-time selection and aggregation of stored steering vectors, steered
// generation, and the (layer, gamma) grid search.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "steerkit/encode.hpp"
#include "steerkit/steer_prep.hpp"
#include "steerkit/tiny_lm.hpp"

namespace steerkit {

enum class Aggregation { kMean, kAttentive };

std::string_view to_string(Aggregation a);
/// Accepts "mean" and "attentive".
Aggregation parse_aggregation(std::string_view s);

inline constexpr int kDefaultTopK = 5;
inline constexpr double kDefaultGamma = 0.3;

/// Layer used when tuning is skipped: floor(L / 2).
inline int default_layer(int n_layers) { return n_layers / 2; }

struct InjectionConfig {
  /// Negative means "use the dictionary's layer".
  int layer = -1;
  /// Inject at `layer` even when the dictionary was built at another layer.
  bool override_layer = false;
  Granularity granularity = Granularity::kAttnMlp;
  /// Unset alpha / beta fall back to gamma.
  std::optional<double> alpha;
  std::optional<double> beta;
  double gamma = kDefaultGamma;
  int top_k = kDefaultTopK;
  Aggregation aggregation = Aggregation::kAttentive;

  double effective_alpha() const { return alpha.value_or(gamma); }
  double effective_beta() const { return beta.value_or(gamma); }
  /// Throws InvalidArgument for negative or non-finite scales, or top_k < 1.
  void validate() const;
};

struct Selection {
  std::vector<std::size_t> indices;  // into dict.entries, best first
  std::vector<double> distances;     // aligned with indices
};

/// Exhaustive scan of cosine distances to every key; the k smallest (all when
/// k > size), ties resolved by entry order. Throws on an empty dict or a key
/// dimension mismatch.
Selection select_topk(const KeyVector& query_key, const SteeringDict& dict, int k);
Selection select_topk(std::string_view query, const SteeringDict& dict, int k,
                      const KeyEncoder& encoder = KeyEncoder::hashed());

struct AggregatedSteering {
  std::vector<float> s_attn;
  std::vector<float> s_mlp;
  std::vector<float> s_whole;
  std::vector<double> weights;  // aligned with the selection
  std::vector<std::uint32_t> selected_pair_ids;
  std::vector<double> distances;
  /// ATTENTIVE found no positive similarity and used uniform weights.
  bool mean_fallback = false;
};

/// MEAN: w = 1/K. ATTENTIVE: sim = max(1 - d, 0), w = sim / sum(sim), uniform
/// when the sum is 0. All three components are aggregated; the sum is taken
/// in a canonical entry order so the result does not depend on the order of
/// the selection.
AggregatedSteering aggregate(const SteeringDict& dict, const Selection& selection, Aggregation mode);

/// Payload for the configured granularity: ATTN -> alpha*s_attn, MLP ->
/// beta*s_mlp, WHOLE -> gamma*s_whole, ATTN_MLP -> alpha*s_attn and beta*s_mlp.
InjectionPayload make_payload(const AggregatedSteering& agg, const InjectionConfig& cfg, int layer);

struct SteeredOutput {
  std::string text;
  std::vector<TokenId> tokens;
  AggregatedSteering aggregation;
  int layer = 0;
  /// The dictionary was empty; output is the unsteered generation.
  bool cold_start = false;
  double retrieval_seconds = 0;   // key encoding, scan and aggregation
  double generation_seconds = 0;
};

/// Generates from "Q: {query}\nA: " with the aggregated payload injected at
/// every position.
SteeredOutput steered_generate(std::string_view query, const SteeringDict& dict, const TinyLm& model,
                               const InjectionConfig& cfg, const GenerateOptions& options = {},
                               const KeyEncoder& encoder = KeyEncoder::hashed());

/// Unsteered generation from the same prompt template.
std::string plain_generate(std::string_view query, const TinyLm& model, const GenerateOptions& options = {});

/// Tokens scored by the tuning guard: the reference bytes, or EOS alone when
/// the reference is empty.
std::vector<TokenId> reference_tokens(std::string_view reference);

struct ValidationExample {
  std::string user;
  std::string query;
  std::string reference;
};

struct TuneRow {
  int layer = 0;
  double gamma = 0;
  double rouge1 = 0;
  double rougeL = 0;
  double mean_logprob = 0;
  bool qualified = false;
};

struct TuneResult {
  int layer = 0;
  double gamma = 0;  // 0 when nothing qualified
  bool steered = false;
  double baseline_rouge1 = 0;
  double baseline_logprob = 0;
  std::vector<TuneRow> rows;  // layer-major, gamma ascending
};

/// Returns the dictionary of `user` built at `layer`.
using DictProvider = std::function<const SteeringDict&(const std::string& user, int layer)>;

/// Layers floor(0.4 L) .. ceil(0.6 L), clamped to the model.
std::vector<int> tune_layers(int n_layers);
/// 0.05, 0.10, ..., 0.80.
std::vector<double> tune_gammas();

inline constexpr double kLogprobGuard = 0.05;

/// Grid search with alpha = beta = gamma. A point qualifies when its mean
/// reference log-probability is at least base - 0.05 * |base|. Picks the
/// qualifying point with the highest mean Rouge-1; ties go to the earlier
/// layer, then the smaller gamma. With no qualifying point returns gamma 0 at
/// the first scanned layer. Throws on an empty validation set.
TuneResult tune(const std::vector<ValidationExample>& validation, const DictProvider& dicts, const TinyLm& model,
                const InjectionConfig& base, const GenerateOptions& options = {},
                const KeyEncoder& encoder = KeyEncoder::hashed());

/// One JSON object per row: layer, gamma, rouge1, rougeL, mean_logprob, qualified.
std::string tune_report_jsonl(const std::vector<TuneRow>& rows);

}  // namespace steerkit
