#include "steerkit/tiny_lm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "steerkit/binary_io.hpp"
#include "steerkit/error.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

constexpr double kNormEps = 1e-6;
constexpr char kWeightsMagic[4] = {'T', 'L', 'M', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }

// y = W x for a row-major rows x cols matrix. Four interleaved accumulators;
// the summation order is fixed so results are reproducible.
void matvec(const std::vector<double>& w, int rows, int cols, const double* x, double* y) {
  for (int r = 0; r < rows; ++r) {
    const double* row = w.data() + static_cast<std::size_t>(r) * cols;
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    int i = 0;
    for (; i + 4 <= cols; i += 4) {
      a0 += row[i] * x[i];
      a1 += row[i + 1] * x[i + 1];
      a2 += row[i + 2] * x[i + 2];
      a3 += row[i + 3] * x[i + 3];
    }
    for (; i < cols; ++i) a0 += row[i] * x[i];
    y[r] = (a0 + a1) + (a2 + a3);
  }
}

void rmsnorm(const double* x, const std::vector<double>& gain, int n, double* out) {
  double ss = 0;
  for (int i = 0; i < n; ++i) ss += x[i] * x[i];
  const double inv = 1.0 / std::sqrt(ss / n + kNormEps);
  for (int i = 0; i < n; ++i) out[i] = x[i] * inv * gain[i];
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

void add_scaled(double* dst, const std::vector<float>& v, double scale) {
  for (std::size_t i = 0; i < v.size(); ++i) dst[i] += scale * static_cast<double>(v[i]);
}

bool all_finite(const std::vector<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

void expect_size(const std::vector<float>& v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw DimensionMismatch(std::string("weight buffer '") + what + "' has " + std::to_string(v.size()) +
                            " values, expected " + std::to_string(n));
  }
}

}  // namespace

std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<std::uint8_t>(c));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(static_cast<char>(static_cast<std::uint8_t>(t)));
  return out;
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw InvalidArgument("n_layers must be >= 1");
  if (d_model < 1) throw InvalidArgument("d_model must be >= 1");
  if (n_heads < 1) throw InvalidArgument("n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    throw InvalidArgument("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
  }
  if (d_ff < 1) throw InvalidArgument("d_ff must be >= 1");
  if (vocab_size != kVocabSize) throw InvalidArgument("vocab_size must be 256 for the byte tokenizer");
  if (max_seq_len < 2) throw InvalidArgument("max_seq_len must be >= 2");
}

Weights Weights::zeros(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  Weights w;
  w.config = config;
  w.embed.assign(v * d, 0.0f);
  w.layers.resize(config.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm.assign(d, 1.0f);
    l.wq.assign(d * d, 0.0f);
    l.wk.assign(d * d, 0.0f);
    l.wv.assign(d * d, 0.0f);
    l.wo.assign(d * d, 0.0f);
    l.mlp_norm.assign(d, 1.0f);
    l.w_up.assign(f * d, 0.0f);
    l.w_down.assign(d * f, 0.0f);
  }
  w.final_norm.assign(d, 1.0f);
  w.unembed.assign(v * d, 0.0f);
  return w;
}

void Weights::validate() const {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  expect_size(embed, v * d, "embed");
  if (layers.size() != static_cast<std::size_t>(config.n_layers)) throw DimensionMismatch("layer count mismatch");
  for (const auto& l : layers) {
    expect_size(l.attn_norm, d, "attn_norm");
    expect_size(l.wq, d * d, "wq");
    expect_size(l.wk, d * d, "wk");
    expect_size(l.wv, d * d, "wv");
    expect_size(l.wo, d * d, "wo");
    expect_size(l.mlp_norm, d, "mlp_norm");
    expect_size(l.w_up, f * d, "w_up");
    expect_size(l.w_down, d * f, "w_down");
  }
  expect_size(final_norm, d, "final_norm");
  expect_size(unembed, v * d, "unembed");
  bool finite = true;
  for_each_buffer([&](const std::vector<float>& b) { finite = finite && all_finite(b); });
  if (!finite) throw InvalidArgument("weights contain non-finite values");
}

std::uint64_t Weights::checksum() const {
  Fnv1a64 h;
  for_each_buffer([&](const std::vector<float>& b) {
    for (float x : b) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
      const std::uint8_t le[4] = {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8),
                                  static_cast<std::uint8_t>(bits >> 16), static_cast<std::uint8_t>(bits >> 24)};
      h.update(le, 4);
    }
  });
  return h.digest();
}

Weights init_weights(const ModelConfig& config) {
  Weights w = Weights::zeros(config);
  Rng rng(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  auto fill = [&](std::vector<float>& buf) {
    for (auto& x : buf) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * scale);
  };
  // Gains stay at 1; they are skipped but keep their slot in the order.
  fill(w.embed);
  for (auto& l : w.layers) {
    fill(l.wq);
    fill(l.wk);
    fill(l.wv);
    fill(l.wo);
    fill(l.w_up);
    fill(l.w_down);
  }
  fill(w.unembed);
  return w;
}

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  weights.validate();
  io::ByteWriter out;
  out.bytes(kWeightsMagic, 4);
  out.u32(kWeightsVersion);
  out.u32(static_cast<std::uint32_t>(weights.config.n_layers));
  out.u32(static_cast<std::uint32_t>(weights.config.d_model));
  out.u32(static_cast<std::uint32_t>(weights.config.n_heads));
  out.u32(static_cast<std::uint32_t>(weights.config.d_ff));
  weights.for_each_buffer([&](const std::vector<float>& b) { out.f32s(b); });
  io::write_file_atomic(path.string(), out.data());
}

Weights load_weights(const std::filesystem::path& path, int max_seq_len) {
  const std::string bytes = io::read_file(path.string());
  io::ByteReader in(bytes);
  char magic[4];
  if (!in.bytes(magic, 4) || !std::equal(magic, magic + 4, kWeightsMagic)) {
    throw InvalidArgument("not a TLMW weight file: " + path.string());
  }
  std::uint32_t version = 0, n_layers = 0, d_model = 0, n_heads = 0, d_ff = 0;
  if (!in.u32(version) || !in.u32(n_layers) || !in.u32(d_model) || !in.u32(n_heads) || !in.u32(d_ff)) {
    throw InvalidArgument("truncated TLMW header: " + path.string());
  }
  if (version != kWeightsVersion) throw InvalidArgument("unsupported TLMW version " + std::to_string(version));
  ModelConfig config;
  config.n_layers = static_cast<int>(n_layers);
  config.d_model = static_cast<int>(d_model);
  config.n_heads = static_cast<int>(n_heads);
  config.d_ff = static_cast<int>(d_ff);
  config.max_seq_len = max_seq_len;
  Weights w = Weights::zeros(config);
  bool ok = true;
  w.for_each_buffer([&](std::vector<float>& b) { ok = ok && in.f32s(b, b.size()); });
  if (!ok) throw InvalidArgument("truncated TLMW payload: " + path.string());
  if (in.remaining() != 0) throw InvalidArgument("trailing bytes in TLMW file: " + path.string());
  w.validate();
  return w;
}

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::kAttn: return "attn";
    case Granularity::kMlp: return "mlp";
    case Granularity::kWhole: return "whole";
    case Granularity::kAttnMlp: return "attn+mlp";
  }
  return "?";
}

Granularity parse_granularity(std::string_view s) {
  if (s == "attn") return Granularity::kAttn;
  if (s == "mlp") return Granularity::kMlp;
  if (s == "whole") return Granularity::kWhole;
  if (s == "attn+mlp" || s == "attn_mlp") return Granularity::kAttnMlp;
  throw InvalidArgument("unknown granularity '" + std::string(s) + "'");
}

void InjectionPayload::validate(const ModelConfig& config) const {
  if (layer < 0 || layer >= config.n_layers) {
    throw InvalidArgument("injection layer " + std::to_string(layer) + " outside [0, " +
                          std::to_string(config.n_layers) + ")");
  }
  if (!s_attn && !s_mlp && !s_whole) throw InvalidArgument("injection payload carries no vector");
  const auto d = static_cast<std::size_t>(config.d_model);
  for (const auto* v : {&s_attn, &s_mlp, &s_whole}) {
    if (*v && (*v)->size() != d) {
      throw DimensionMismatch("steering vector length " + std::to_string((*v)->size()) + " != d_model " +
                              std::to_string(d));
    }
    if (*v && !all_finite(**v)) throw InvalidArgument("steering vector contains non-finite values");
  }
  for (double s : {alpha, beta, gamma}) {
    if (!std::isfinite(s) || s < 0) throw InvalidArgument("injection scales must be finite and >= 0");
  }
}

bool InjectionPayload::is_identity() const {
  return (!s_attn || alpha == 0.0) && (!s_mlp || beta == 0.0) && (!s_whole || gamma == 0.0);
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

ModelFingerprint compute_fingerprint(const Weights& weights) {
  const std::uint64_t sum = weights.checksum();
  const std::uint32_t dims[5] = {static_cast<std::uint32_t>(weights.config.n_layers),
                                 static_cast<std::uint32_t>(weights.config.d_model),
                                 static_cast<std::uint32_t>(weights.config.n_heads),
                                 static_cast<std::uint32_t>(weights.config.d_ff),
                                 static_cast<std::uint32_t>(weights.config.vocab_size)};
  ModelFingerprint fp{};
  const std::uint64_t bases[2] = {kFnv64Offset, 0x84222325CBF29CE4ULL};
  for (int half = 0; half < 2; ++half) {
    Fnv1a64 h(bases[half]);
    for (std::uint32_t d : dims) {
      const std::uint8_t le[4] = {static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(d >> 8),
                                  static_cast<std::uint8_t>(d >> 16), static_cast<std::uint8_t>(d >> 24)};
      h.update(le, 4);
    }
    for (int i = 0; i < 8; ++i) {
      const auto b = static_cast<std::uint8_t>(sum >> (8 * i));
      h.update(&b, 1);
    }
    const std::uint64_t dg = h.digest();
    for (int i = 0; i < 8; ++i) fp[half * 8 + i] = static_cast<std::uint8_t>(dg >> (8 * i));
  }
  return fp;
}

std::string to_hex(const ModelFingerprint& fp) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  for (auto b : fp) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xF]);
  }
  return s;
}

TinyLm::TinyLm(Weights weights) : weights_(std::move(weights)) {
  weights_.validate();
  embed_ = widen(weights_.embed);
  layers_.reserve(weights_.layers.size());
  for (const auto& l : weights_.layers) {
    layers_.push_back(Layer{widen(l.attn_norm), widen(l.wq), widen(l.wk), widen(l.wv), widen(l.wo),
                            widen(l.mlp_norm), widen(l.w_up), widen(l.w_down)});
  }
  final_norm_ = widen(weights_.final_norm);
  unembed_ = widen(weights_.unembed);
  fingerprint_ = compute_fingerprint(weights_);
}

// Incremental decoder state: one position is processed per step() and the
// key/value cache grows. A full forward pass is steps over every position, so
// prefill and decode share one code path.
class TinyLm::Session {
 public:
  Session(const TinyLm& model, const RunOptions& options)
      : m_(model),
        cfg_(model.config()),
        opt_(options),
        d_(cfg_.d_model),
        f_(cfg_.d_ff),
        keys_(cfg_.n_layers),
        values_(cfg_.n_layers),
        x_(d_),
        norm_(d_),
        q_(d_),
        k_(d_),
        v_(d_),
        ctx_(d_),
        attn_(d_),
        hidden_(f_),
        mlp_(d_),
        scores_(cfg_.max_seq_len),
        logits_(cfg_.vocab_size) {
    if (opt_.payload) opt_.payload->validate(cfg_);
    for (auto* layer : {&opt_.tap_layer, &opt_.states_layer, &opt_.attention_layer}) {
      if (*layer && (**layer < 0 || **layer >= cfg_.n_layers)) {
        throw InvalidArgument("hook layer " + std::to_string(**layer) + " outside [0, " +
                              std::to_string(cfg_.n_layers) + ")");
      }
    }
    for (int layer : opt_.tap_layers) {
      if (layer < 0 || layer >= cfg_.n_layers) {
        throw InvalidArgument("hook layer " + std::to_string(layer) + " outside [0, " +
                              std::to_string(cfg_.n_layers) + ")");
      }
    }
    layer_taps.resize(opt_.tap_layers.size());
    // Without logits nothing past the deepest observed layer is needed.
    if (opt_.logits == RunOptions::LogitsMode::kNone) {
      int deepest = -1;
      for (const auto* layer : {&opt_.tap_layer, &opt_.states_layer, &opt_.attention_layer}) {
        if (*layer) deepest = std::max(deepest, **layer);
      }
      for (int layer : opt_.tap_layers) deepest = std::max(deepest, layer);
      if (deepest >= 0) last_layer_ = deepest;
    }
    for (int l = 0; l < cfg_.n_layers; ++l) {
      keys_[l].reserve(static_cast<std::size_t>(cfg_.max_seq_len) * d_);
      values_[l].reserve(static_cast<std::size_t>(cfg_.max_seq_len) * d_);
    }
  }

  int length() const { return len_; }

  // Processes `token` at the next position. Returns logits when requested,
  // otherwise nullptr.
  const std::vector<double>* step(TokenId token, bool want_logits) {
    if (len_ >= cfg_.max_seq_len) {
      throw SequenceLengthError("sequence exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    if (token < 0 || token >= cfg_.vocab_size) throw InvalidArgument("token id out of range");
    const int pos = len_++;
    const double* e = m_.embed_.data() + static_cast<std::size_t>(token) * d_;
    std::copy(e, e + d_, x_.begin());

    const int n_heads = cfg_.n_heads;
    const int hd = cfg_.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const InjectionPayload* p = opt_.payload;

    for (int l = 0; l <= last_layer_; ++l) {
      const Layer& w = m_.layers_[l];
      const bool inject = p && p->layer == l;

      rmsnorm(x_.data(), w.attn_norm, d_, norm_.data());
      matvec(w.wq, d_, d_, norm_.data(), q_.data());
      matvec(w.wk, d_, d_, norm_.data(), k_.data());
      matvec(w.wv, d_, d_, norm_.data(), v_.data());
      keys_[l].insert(keys_[l].end(), k_.begin(), k_.end());
      values_[l].insert(values_[l].end(), v_.begin(), v_.end());
      const double* kc = keys_[l].data();
      const double* vc = values_[l].data();
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= pos; ++j) {
          const double* kj = kc + static_cast<std::size_t>(j) * d_ + off;
          double s = 0;
          for (int i = 0; i < hd; ++i) s += q_[off + i] * kj[i];
          s *= inv_sqrt_hd;
          scores_[j] = s;
          mx = std::max(mx, s);
        }
        double sum = 0;
        for (int j = 0; j <= pos; ++j) {
          scores_[j] = std::exp(scores_[j] - mx);
          sum += scores_[j];
        }
        for (int j = 0; j <= pos; ++j) scores_[j] /= sum;
        if (opt_.attention_layer && *opt_.attention_layer == l) {
          attention.emplace_back(scores_.begin(), scores_.begin() + pos + 1);
        }
        for (int i = 0; i < hd; ++i) ctx_[off + i] = 0;
        for (int j = 0; j <= pos; ++j) {
          const double* vj = vc + static_cast<std::size_t>(j) * d_ + off;
          const double pj = scores_[j];
          for (int i = 0; i < hd; ++i) ctx_[off + i] += pj * vj[i];
        }
      }
      matvec(w.wo, d_, d_, ctx_.data(), attn_.data());
      if (inject && p->s_attn && p->alpha != 0.0) add_scaled(attn_.data(), *p->s_attn, p->alpha);
      for (int i = 0; i < d_; ++i) x_[i] += attn_[i];

      rmsnorm(x_.data(), w.mlp_norm, d_, norm_.data());
      matvec(w.w_up, f_, d_, norm_.data(), hidden_.data());
      for (auto& h : hidden_) h = silu(h);
      matvec(w.w_down, d_, f_, hidden_.data(), mlp_.data());
      if (inject && p->s_mlp && p->beta != 0.0) add_scaled(mlp_.data(), *p->s_mlp, p->beta);
      for (int i = 0; i < d_; ++i) x_[i] += mlp_[i];
      if (inject && p->s_whole && p->gamma != 0.0) add_scaled(x_.data(), *p->s_whole, p->gamma);

      if (opt_.tap_layer && *opt_.tap_layer == l) {
        tap.attn_out = attn_;
        tap.mlp_out = mlp_;
        tap.whole_out = x_;
      }
      for (std::size_t t = 0; t < opt_.tap_layers.size(); ++t) {
        if (opt_.tap_layers[t] == l) layer_taps[t] = ActivationTap{attn_, mlp_, x_};
      }
      if (opt_.states_layer && *opt_.states_layer == l) states.push_back(x_);
    }

    if (!want_logits) return nullptr;
    if (last_layer_ != cfg_.n_layers - 1) throw InvalidArgument("logits requested from a truncated pass");
    rmsnorm(x_.data(), m_.final_norm_, d_, norm_.data());
    matvec(m_.unembed_, cfg_.vocab_size, d_, norm_.data(), logits_.data());
    return &logits_;
  }

  ActivationTap tap;
  std::vector<ActivationTap> layer_taps;
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> attention;

 private:
  const TinyLm& m_;
  const ModelConfig& cfg_;
  RunOptions opt_;
  int d_;
  int f_;
  int len_ = 0;
  int last_layer_ = cfg_.n_layers - 1;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> x_, norm_, q_, k_, v_, ctx_, attn_, hidden_, mlp_, scores_, logits_;
};

RunResult TinyLm::run(std::span<const TokenId> tokens, const RunOptions& options) const {
  if (tokens.empty()) throw SequenceLengthError("empty token sequence");
  if (static_cast<int>(tokens.size()) > config().max_seq_len) {
    throw SequenceLengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                              std::to_string(config().max_seq_len));
  }
  Session s(*this, options);
  RunResult out;
  const int n = static_cast<int>(tokens.size());
  const int vocab = config().vocab_size;
  if (options.logits == RunOptions::LogitsMode::kAll) {
    out.logits.seq_len = n;
    out.logits.vocab = vocab;
    out.logits.data.reserve(static_cast<std::size_t>(n) * vocab);
  }
  for (int i = 0; i < n; ++i) {
    const bool last = i + 1 == n;
    const bool want = options.logits == RunOptions::LogitsMode::kAll ||
                      (options.logits == RunOptions::LogitsMode::kLast && last);
    const auto* lg = s.step(tokens[i], want);
    if (lg && options.logits == RunOptions::LogitsMode::kAll) {
      out.logits.data.insert(out.logits.data.end(), lg->begin(), lg->end());
    } else if (lg) {
      out.logits = Logits{1, vocab, *lg};
    }
  }
  if (options.tap_layer) out.tap = std::move(s.tap);
  out.layer_taps = std::move(s.layer_taps);
  out.states = std::move(s.states);
  out.attention = std::move(s.attention);
  return out;
}

ForwardResult TinyLm::forward_full(std::span<const TokenId> tokens, const HookConfig& hook) const {
  RunOptions opt;
  opt.tap_layer = hook.layer;
  RunResult r = run(tokens, opt);
  return ForwardResult{std::move(r.logits), std::move(*r.tap)};
}

Logits TinyLm::forward_injected(std::span<const TokenId> tokens, const InjectionPayload& payload) const {
  RunOptions opt;
  opt.payload = &payload;
  return run(tokens, opt).logits;
}

std::vector<TokenId> TinyLm::generate(std::span<const TokenId> prompt, const InjectionPayload* payload,
                                      const GenerateOptions& options) const {
  if (prompt.empty()) throw SequenceLengthError("empty prompt");
  if (options.max_new < 0) throw InvalidArgument("max_new must be >= 0");
  if (static_cast<int>(prompt.size()) > config().max_seq_len) {
    throw SequenceLengthError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                              std::to_string(config().max_seq_len));
  }
  std::vector<TokenId> out;
  if (options.max_new == 0 || static_cast<int>(prompt.size()) == config().max_seq_len) return out;
  RunOptions opt;
  opt.payload = payload;
  Session s(*this, opt);
  const std::vector<double>* lg = nullptr;
  for (std::size_t i = 0; i < prompt.size(); ++i) lg = s.step(prompt[i], i + 1 == prompt.size());
  while (static_cast<int>(out.size()) < options.max_new) {
    const TokenId next = argmax(*lg);
    if (options.stop_at_eos && next == kEndOfText) break;
    out.push_back(next);
    // Prompt plus output never exceeds the context.
    if (static_cast<int>(out.size()) == options.max_new || s.length() + 1 >= config().max_seq_len) break;
    lg = s.step(next, true);
  }
  return out;
}

double TinyLm::mean_logprob(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                            const InjectionPayload* payload) const {
  if (prompt.empty()) throw SequenceLengthError("empty prompt");
  if (continuation.empty()) throw InvalidArgument("empty continuation");
  const std::size_t total = prompt.size() + continuation.size();
  if (total - 1 > static_cast<std::size_t>(config().max_seq_len)) {
    throw SequenceLengthError("prompt + continuation exceeds max_seq_len");
  }
  RunOptions opt;
  opt.payload = payload;
  Session s(*this, opt);
  double sum = 0;
  const std::vector<double>* lg = nullptr;
  for (std::size_t i = 0; i < prompt.size(); ++i) lg = s.step(prompt[i], i + 1 == prompt.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const double mx = *std::max_element(lg->begin(), lg->end());
    double z = 0;
    for (double v : *lg) z += std::exp(v - mx);
    sum += (*lg)[continuation[i]] - mx - std::log(z);
    if (i + 1 < continuation.size()) lg = s.step(continuation[i], true);
  }
  return sum / static_cast<double>(continuation.size());
}

}  // namespace steerkit
