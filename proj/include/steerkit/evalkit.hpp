#pragma once

// Evaluation toolkit: analytic probe models, synthetic style corpora with
// sub-populations and drift, the in-context baseline, and the experiment and
// latency runners.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steerkit/corpus.hpp"
#include "steerkit/metrics.hpp"
#include "steerkit/steer_infer.hpp"
#include "steerkit/steer_prep.hpp"
#include "steerkit/tiny_lm.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Probe models

/// Passthrough transformer: every attention and MLP matrix is zero, so the
/// residual stream at each block exit is the token embedding plus whatever is
/// injected. The unembedding row of `target` is scale * direction and every
/// other row has a nonpositive dot product with direction.
struct ProbeModel {
  Weights weights;
  TokenId target = 0;
  std::vector<float> direction;  // unit norm
  double scale = 0;
};

ProbeModel make_probe_model(const ModelConfig& config, TokenId target, std::uint64_t direction_seed,
                            double scale = 4.0);

/// Hand-built model whose only active block reacts to marker bytes. Attention
/// head 0 of `active_layer` attends to earlier marker positions and writes a
/// per-marker feature; the MLP amplifies it; each marker's unembedding row
/// reads both. Without markers in view it answers with end-of-text at once, and
/// right after emitting a marker it stops. Steering deltas extracted from
/// marker-styled contexts therefore make it emit the steered marker.
struct MarkerModelSpec {
  std::string markers = "#@";
  int active_layer = 2;
  std::uint64_t seed = 0;
  double marker_recency = 3.0;    // r component of marker embeddings
  double score_gain = 1.75;       // query and key gain of head 0
  double value_gain = 0.4;        // marker presence -> attention feature
  double eos_base = 0.5;          // end-of-text weight on the constant dim
  double eos_after_marker = 3.0;  // end-of-text weight on r
  double feature_gain = 1.0;      // marker logit weight on its features
  double regular_logit = 0.15;    // range of the other unembedding rows
};

Weights make_marker_model(const MarkerModelSpec& spec, const ModelConfig& config = {});

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class Casing { kLower, kUpper, kTitle };

struct SubpopulationStyle {
  char marker = '#';
  Casing casing = Casing::kLower;
  std::vector<std::string> themes;     // query topics
  std::vector<std::string> vocabulary; // preferred answer words
  double vocabulary_bias = 0.7;        // chance of drawing from `vocabulary`
};

struct SynthSpec {
  int n_users = 20;
  int records_per_user = 40;
  int n_subpopulations = 2;
  /// Fraction of the timeline after which drifting users adopt the style of
  /// the next subpopulation. Unset means no drift.
  std::optional<double> drift_point = 0.5;
  double drifting_user_fraction = 0.5;
  int answer_words = 4;
  /// Defaults are generated per subpopulation when empty.
  std::vector<SubpopulationStyle> styles;
  std::uint64_t seed = 0;

  void validate() const;
  /// `styles`, or the built-in palette for n_subpopulations.
  std::vector<SubpopulationStyle> resolved_styles() const;
};

struct RecordLabel {
  int subpop = 0;  // style active for this record
  int home_subpop = 0;
  bool drifting_user = false;
  bool post_drift = false;
};

struct SynthCorpus {
  UserCorpus corpus;
  std::map<RecordId, RecordLabel> labels;
  std::vector<SubpopulationStyle> styles;
};

/// Deterministic in the spec. Users "u00", "u01", ... get subpopulation
/// index mod n_subpopulations; a seeded subset of drifting_user_fraction of
/// them switches to (subpop + 1) mod n at record ceil(drift_point * n).
SynthCorpus synth_corpus(const SynthSpec& spec, double test_fraction = kDefaultTestFraction);

// ---------------------------------------------------------------------------
// Baselines and experiments

/// Prompt with up to k retrieved examples of the user. When the prompt plus
/// max_new would overflow the context, the oldest examples are dropped first.
std::string icl_prompt(std::string_view query, std::string_view user, const UserCorpus& corpus, int k,
                       const TinyLm& model, int max_new);
std::string run_icl_baseline(std::string_view query, std::string_view user, const UserCorpus& corpus, int k,
                             const TinyLm& model, int max_new);

struct MethodSpec {
  enum class Kind { kZeroShot, kIcl, kSteer };
  Kind kind = Kind::kZeroShot;
  int icl_k = kDefaultContextRecords;
  Granularity granularity = Granularity::kAttnMlp;
  Aggregation aggregation = Aggregation::kAttentive;

  std::string name() const;
};

/// "zeroshot", "icl[:k]", "steer[:granularity[:aggregation]]".
MethodSpec parse_method(std::string_view text);

inline const std::vector<double> kDefaultFractions = {0.05, 0.15, 0.25, 0.5, 1.0};

struct ExperimentSpec {
  std::vector<MethodSpec> methods = {MethodSpec{}};
  std::vector<double> fractions = kDefaultFractions;
  TrainWindow window = TrainWindow::kLatest;
  PrepConfig prep;
  /// top_k, aggregation defaults, and the untuned layer / gamma.
  InjectionConfig injection;
  /// Grid-search (layer, gamma) per fraction on each user's last train record.
  bool tune = true;
  int max_new = 16;
  /// Queries in the latency study; 0 skips it.
  int latency_queries = 0;
  int latency_max_new = 16;
  std::uint64_t seed = 0;
};

struct EvalRow {
  std::string method;
  double fraction = 0;
  int subpop = 0;  // -1 for cohort rows
  std::string cohort;  // "subpop" or "drifting_post_drift"
  std::uint64_t seed = 0;
  int n_queries = 0;
  double rouge1 = 0;
  double rougeL = 0;
  std::optional<int> layer;     // steering methods only
  std::optional<double> gamma;

  bool operator==(const EvalRow&) const = default;
};

struct LatencyReport {
  int n_queries = 0;
  int max_new = 0;
  double direct_seconds = 0;
  double steered_seconds = 0;    // retrieval + steered generation
  double retrieval_seconds = 0;
  double injection_seconds = 0;  // steered generation minus direct generation
  double ratio() const { return direct_seconds > 0 ? steered_seconds / direct_seconds : 0.0; }
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::optional<LatencyReport> latency;

  /// Metric rows only, so reruns with the same seeds give identical bytes.
  std::string to_jsonl() const;
  std::string latency_json() const;
  /// One line per method with Rouge-1 / Rouge-L at each fraction.
  std::string summary_table() const;
};

std::string to_json_line(const EvalRow& row);

/// Runs every method at every fraction. Rows go per (method, fraction,
/// subpopulation of the record's active style), plus a drifting_post_drift
/// cohort row whenever such test records exist. When `report_path` is set,
/// each row is appended as soon as it is computed.
EvalReport run_experiment(const UserCorpus& corpus, const std::map<RecordId, RecordLabel>& labels,
                          const TinyLm& model, const ExperimentSpec& spec,
                          const std::optional<std::filesystem::path>& report_path = {});

/// Builds one dictionary per user at `layer`.
std::map<std::string, SteeringDict> build_all_dicts(const UserCorpus& corpus, const TinyLm& model, int layer,
                                                    const PrepConfig& prep);

/// Direct vs steered generation over n queries cycled from the test split,
/// decoding exactly max_new tokens each. Each query is timed direct then
/// steered.
LatencyReport run_latency_study(const UserCorpus& corpus, const std::map<std::string, SteeringDict>& dicts,
                                const TinyLm& model, const InjectionConfig& cfg, int n_queries, int max_new,
                                const KeyEncoder& encoder = KeyEncoder::hashed());

}  // namespace steerkit
