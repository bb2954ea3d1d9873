#pragma once

// Minimal decoder-only transformer with activation taps and additive
// injection sites on every layer's attention and MLP sub-layers.
//
// Block layout (pre-norm, no positional term):
//   a    = rmsnorm(x) * attn_gain
//   attn = Wo · causal_mha(Wq a, Wk a, Wv a)      [+ alpha * s_attn]   <- ATTN tap
//   x   += attn
//   m    = rmsnorm(x) * mlp_gain
//   mlp  = Wdown · silu(Wup m)                    [+ beta * s_mlp]     <- MLP tap
//   x   += mlp                                    [+ gamma * s_whole]  <- WHOLE tap
// logits = Wunembed · (rmsnorm(x) * final_gain)
//
// Weights are stored as f32 (the on-disk precision); all arithmetic runs in
// double so taps and logits are reproducible to well below 1e-9.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

using TokenId = int;

inline constexpr int kVocabSize = 256;
inline constexpr TokenId kEndOfText = 0;

/// One token per UTF-8 byte.
std::vector<TokenId> tokenize(std::string_view text);
std::string detokenize(std::span<const TokenId> tokens);

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = kVocabSize;
  int max_seq_len = 512;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument on a violated invariant.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
  std::vector<float> attn_norm;  // d_model
  std::vector<float> wq, wk, wv, wo;  // d_model x d_model, row-major [out][in]
  std::vector<float> mlp_norm;  // d_model
  std::vector<float> w_up;  // d_ff x d_model
  std::vector<float> w_down;  // d_model x d_ff
};

struct Weights {
  ModelConfig config;
  std::vector<float> embed;  // vocab x d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // d_model
  std::vector<float> unembed;  // vocab x d_model

  /// Zero-filled buffers of the right shapes, unit norm gains.
  static Weights zeros(const ModelConfig& config);

  /// Checks every buffer shape against config and that all values are finite.
  void validate() const;

  /// Visits every parameter buffer in the canonical serialization order:
  /// embed, per layer {attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down},
  /// final_norm, unembed.
  template <typename Fn>
  void for_each_buffer(Fn&& fn) const {
    fn(embed);
    for (const auto& l : layers) {
      fn(l.attn_norm); fn(l.wq); fn(l.wk); fn(l.wv); fn(l.wo);
      fn(l.mlp_norm); fn(l.w_up); fn(l.w_down);
    }
    fn(final_norm);
    fn(unembed);
  }
  template <typename Fn>
  void for_each_buffer(Fn&& fn) {
    fn(embed);
    for (auto& l : layers) {
      fn(l.attn_norm); fn(l.wq); fn(l.wk); fn(l.wv); fn(l.wo);
      fn(l.mlp_norm); fn(l.w_up); fn(l.w_down);
    }
    fn(final_norm);
    fn(unembed);
  }

  /// FNV-1a 64 over the little-endian bytes of every buffer.
  std::uint64_t checksum() const;
};

/// Pseudo-random weights: every matrix entry is (2u - 1) / sqrt(d_model) with u
/// drawn from mt19937_64(seed) (53-bit mantissa), in serialization order.
/// Norm gains are 1.
Weights init_weights(const ModelConfig& config);

/// TLMW weight file: "TLMW", u32 version, u32 n_layers, u32 d_model,
/// u32 n_heads, u32 d_ff, then every buffer as f32 LE in serialization order.
void save_weights(const Weights& weights, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path, int max_seq_len = 512);

enum class Granularity { kAttn, kMlp, kWhole, kAttnMlp };

std::string_view to_string(Granularity g);
/// Accepts "attn", "mlp", "whole", "attn+mlp" (also "attn_mlp").
Granularity parse_granularity(std::string_view s);

struct HookConfig {
  int layer = 0;
  Granularity granularity = Granularity::kAttnMlp;
};

/// Sub-layer activations at one layer for the last position of a sequence.
/// attn_out / mlp_out are taken before the residual addition, whole_out is the
/// residual stream at block exit. Values are post-injection when a payload
/// targets the same layer.
struct ActivationTap {
  std::vector<double> attn_out;
  std::vector<double> mlp_out;
  std::vector<double> whole_out;
};

struct InjectionPayload {
  int layer = 0;
  std::optional<std::vector<float>> s_attn;
  std::optional<std::vector<float>> s_mlp;
  std::optional<std::vector<float>> s_whole;
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;

  /// Throws on missing vectors, wrong lengths, bad layer, or bad scales.
  void validate(const ModelConfig& config) const;
  bool is_identity() const;
};

/// Row-major seq_len x vocab matrix.
struct Logits {
  int seq_len = 0;
  int vocab = 0;
  std::vector<double> data;

  std::span<const double> row(int pos) const {
    return {data.data() + static_cast<std::size_t>(pos) * vocab, static_cast<std::size_t>(vocab)};
  }
  bool operator==(const Logits&) const = default;
};

struct ForwardResult {
  Logits logits;
  ActivationTap tap;
};

/// Knobs for the general forward pass that forward_full / forward_injected
/// specialize.
struct RunOptions {
  const InjectionPayload* payload = nullptr;
  std::optional<int> tap_layer;
  /// Additional last-position taps, returned in RunResult::layer_taps in the
  /// same order.
  std::vector<int> tap_layers;
  /// Collects the block-exit residual of every position at this layer.
  std::optional<int> states_layer;
  /// Records softmax rows (one per position and head) at this layer.
  std::optional<int> attention_layer;
  enum class LogitsMode { kAll, kLast, kNone } logits = LogitsMode::kAll;
};

struct RunResult {
  Logits logits;  // kAll: every position; kLast: one row; kNone: empty
  std::optional<ActivationTap> tap;
  std::vector<ActivationTap> layer_taps;
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> attention;
};

struct GenerateOptions {
  int max_new = 32;
  bool stop_at_eos = true;
};

using ModelFingerprint = std::array<std::uint8_t, 16>;

/// Immutable model. Every const member is safe to call concurrently; each call
/// owns its scratch buffers.
class TinyLm {
 public:
  explicit TinyLm(Weights weights);

  const ModelConfig& config() const { return weights_.config; }
  const Weights& weights() const { return weights_; }
  const ModelFingerprint& fingerprint() const { return fingerprint_; }

  ForwardResult forward_full(std::span<const TokenId> tokens, const HookConfig& hook) const;
  Logits forward_injected(std::span<const TokenId> tokens, const InjectionPayload& payload) const;
  RunResult run(std::span<const TokenId> tokens, const RunOptions& options) const;

  /// Greedy decoding; ties resolve to the lowest token id. Stops at max_new,
  /// at kEndOfText (when enabled, not included in the output), or when the
  /// sequence reaches max_seq_len.
  std::vector<TokenId> generate(std::span<const TokenId> prompt, const InjectionPayload* payload,
                                const GenerateOptions& options) const;

  /// Mean natural-log probability of `continuation` given `prompt` under
  /// teacher forcing, with optional injection.
  double mean_logprob(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                      const InjectionPayload* payload) const;

 private:
  struct Layer {
    std::vector<double> attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
  };
  class Session;

  Weights weights_;
  std::vector<double> embed_;
  std::vector<Layer> layers_;
  std::vector<double> final_norm_;
  std::vector<double> unembed_;
  ModelFingerprint fingerprint_{};
};

/// Index of the largest value; lowest index wins ties.
int argmax(std::span<const double> values);

/// 16-byte fingerprint: two FNV-1a 64 digests (different bases) over the
/// config dimensions and the weight checksum.
ModelFingerprint compute_fingerprint(const Weights& weights);
std::string to_hex(const ModelFingerprint& fp);

}  // namespace steerkit
