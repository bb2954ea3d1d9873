#include "steerkit/encode.hpp"

#include <algorithm>
#include <cmath>

#include "steerkit/error.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/tiny_lm.hpp"

namespace steerkit {

namespace {

// Length of the UTF-8 sequence starting at s[i], or 1 when malformed.
std::size_t utf8_run(std::string_view s, std::size_t i) {
  const auto lead = static_cast<std::uint8_t>(s[i]);
  std::size_t n = 1;
  if (lead >= 0xF0 && lead <= 0xF4) n = 4;
  else if (lead >= 0xE0) n = 3;
  else if (lead >= 0xC2 && lead <= 0xDF) n = 2;
  if (n == 1 || i + n > s.size()) return 1;
  for (std::size_t k = 1; k < n; ++k) {
    if ((static_cast<std::uint8_t>(s[i + k]) & 0xC0) != 0x80) return 1;
  }
  return n;
}

KeyVector normalized(std::vector<double> acc) {
  double ss = 0;
  for (double v : acc) ss += v * v;
  KeyVector key;
  key.values.assign(acc.size(), 0.0f);
  if (ss == 0.0) return key;
  const double inv = 1.0 / std::sqrt(ss);
  for (std::size_t i = 0; i < acc.size(); ++i) key.values[i] = static_cast<float>(acc[i] * inv);
  return key;
}

}  // namespace

std::vector<std::string> lowercase_chars(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    const std::size_t n = utf8_run(text, i);
    std::string ch(text.substr(i, n));
    if (n == 1 && ch[0] >= 'A' && ch[0] <= 'Z') ch[0] = static_cast<char>(ch[0] - 'A' + 'a');
    out.push_back(std::move(ch));
    i += n;
  }
  return out;
}

std::uint32_t gram_bucket(std::string_view gram, int key_dim) {
  return fnv1a32(gram) % static_cast<std::uint32_t>(key_dim);
}

KeyVector encode_text(std::string_view text, int key_dim) {
  if (key_dim < 16) throw InvalidArgument("key_dim must be >= 16");
  std::vector<double> acc(key_dim, 0.0);
  const auto chars = lowercase_chars(text);
  if (chars.empty()) return normalized(std::move(acc));
  if (chars.size() < 3) {
    std::string gram;
    for (const auto& c : chars) gram += c;
    acc[gram_bucket(gram, key_dim)] += 1.0;
  } else {
    for (std::size_t i = 0; i + 3 <= chars.size(); ++i) {
      const std::string gram = chars[i] + chars[i + 1] + chars[i + 2];
      acc[gram_bucket(gram, key_dim)] += 1.0;
    }
  }
  return normalized(std::move(acc));
}

KeyVector encode_with_model(std::string_view text, const TinyLm& model, int layer) {
  const int d = model.config().d_model;
  if (layer < 0 || layer >= model.config().n_layers) throw InvalidArgument("encoder layer out of range");
  if (text.empty()) return KeyVector{std::vector<float>(d, 0.0f)};
  const auto tokens = tokenize(text);
  RunOptions opt;
  opt.states_layer = layer;
  opt.logits = RunOptions::LogitsMode::kNone;
  const RunResult r = model.run(tokens, opt);
  std::vector<double> mean(d, 0.0);
  for (const auto& s : r.states) {
    for (int i = 0; i < d; ++i) mean[i] += s[i];
  }
  for (auto& v : mean) v /= static_cast<double>(r.states.size());
  return normalized(std::move(mean));
}

double cosine_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionMismatch("cosine_distance: dimensions " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double d = 1.0 - dot / std::sqrt(na * nb);
  return std::clamp(d, 0.0, 2.0);
}

KeyEncoder KeyEncoder::with_model(const TinyLm& model, int layer) {
  return {Kind::kModel, model.config().d_model, &model, layer};
}

KeyVector KeyEncoder::encode(std::string_view text) const {
  if (kind == Kind::kModel) {
    if (!model) throw InvalidArgument("model-based key encoder has no model");
    return encode_with_model(text, *model, layer);
  }
  return encode_text(text, key_dim);
}

int KeyEncoder::dim() const { return kind == Kind::kModel && model ? model->config().d_model : key_dim; }

}  // namespace steerkit
