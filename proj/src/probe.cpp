#include <cmath>

#include "steerkit/error.hpp"
#include "steerkit/evalkit.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

double dot(const float* a, const float* b, int n) {
  double s = 0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

float* row(std::vector<float>& m, int r, int d) { return m.data() + static_cast<std::size_t>(r) * d; }

}  // namespace

ProbeModel make_probe_model(const ModelConfig& config, TokenId target, std::uint64_t direction_seed, double scale) {
  config.validate();
  if (target < 0 || target >= config.vocab_size) throw InvalidArgument("probe target token out of range");
  if (!(scale > 0) || !std::isfinite(scale)) throw InvalidArgument("probe scale must be finite and > 0");
  const int d = config.d_model;
  ProbeModel probe;
  probe.weights = Weights::zeros(config);
  probe.target = target;
  probe.scale = scale;

  Rng dir_rng(direction_seed);
  std::vector<double> e(d);
  double norm = 0;
  do {
    norm = 0;
    for (auto& v : e) {
      v = dir_rng.normal();
      norm += v * v;
    }
  } while (norm == 0);
  norm = std::sqrt(norm);
  probe.direction.resize(d);
  for (int i = 0; i < d; ++i) probe.direction[i] = static_cast<float>(e[i] / norm);
  const float* dir = probe.direction.data();

  Rng rng(config.seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : probe.weights.embed) v = static_cast<float>(rng.uniform(-s, s));
  const double dir_sq = dot(dir, dir, d);
  for (int t = 0; t < config.vocab_size; ++t) {
    float* u = row(probe.weights.unembed, t, d);
    if (t == target) {
      for (int i = 0; i < d; ++i) u[i] = static_cast<float>(scale * dir[i]);
      continue;
    }
    for (int i = 0; i < d; ++i) u[i] = static_cast<float>(rng.uniform(-s, s));
    // Push the row to a small negative dot with the direction; repeat in case
    // f32 rounding leaves it positive.
    for (double proj = dot(u, dir, d); proj > 0; proj = dot(u, dir, d)) {
      const double k = (proj + 1e-3) / dir_sq;
      for (int i = 0; i < d; ++i) u[i] = static_cast<float>(u[i] - k * dir[i]);
    }
  }
  probe.weights.validate();
  return probe;
}

Weights make_marker_model(const MarkerModelSpec& spec, const ModelConfig& config) {
  config.validate();
  const int m = static_cast<int>(spec.markers.size());
  const int d = config.d_model;
  if (m < 1) throw InvalidArgument("marker model needs at least one marker");
  if (spec.active_layer < 0 || spec.active_layer >= config.n_layers) {
    throw InvalidArgument("marker model active layer out of range");
  }
  // Residual layout: z (constant), r (just saw a marker), p_i (marker i
  // present), f_i (attention feature), g_i (MLP feature), then token noise.
  const int z = 0, r = 1, p0 = 2, f0 = p0 + m, g0 = f0 + m, noise0 = g0 + m;
  if (d - noise0 < 8 || config.head_dim() < m + 1 || config.d_ff < m) {
    throw InvalidArgument("model too small for " + std::to_string(m) + " markers");
  }
  for (char c : spec.markers) {
    if (c == '\0') throw InvalidArgument("end-of-text cannot be a marker");
  }
  if (spec.markers.find_first_of(" \t\n") != std::string::npos) {
    throw InvalidArgument("markers must not be whitespace");
  }

  Weights w = Weights::zeros(config);
  Rng rng(config.seed ^ spec.seed);
  for (int t = 0; t < config.vocab_size; ++t) {
    float* x = row(w.embed, t, d);
    x[z] = 1.0f;
    const auto pos = spec.markers.find(static_cast<char>(t));
    if (pos != std::string::npos) {
      x[r] = static_cast<float>(spec.marker_recency);
      x[p0 + static_cast<int>(pos)] = 1.0f;
      continue;
    }
    double norm = 0;
    std::vector<double> v(d - noise0);
    for (auto& c : v) {
      c = rng.normal();
      norm += c * c;
    }
    for (int i = 0; i < d - noise0; ++i) x[noise0 + i] = static_cast<float>(v[i] / std::sqrt(norm));
  }

  auto& L = w.layers[spec.active_layer];
  for (int i = 0; i < m; ++i) {
    // Head 0: query reads z, key reads marker presence, so marker positions
    // dominate the softmax; the value carries which marker it was.
    row(L.wq, 0, d)[z] = static_cast<float>(spec.score_gain);
    row(L.wk, 0, d)[p0 + i] = static_cast<float>(spec.score_gain);
    row(L.wv, 1 + i, d)[p0 + i] = static_cast<float>(spec.value_gain);
    row(L.wo, f0 + i, d)[1 + i] = 1.0f;
    row(L.w_up, i, d)[f0 + i] = 1.0f;
    row(L.w_down, g0 + i, config.d_ff)[i] = 1.0f;
  }

  for (int t = 0; t < config.vocab_size; ++t) {
    float* u = row(w.unembed, t, d);
    const auto pos = spec.markers.find(static_cast<char>(t));
    if (t == kEndOfText) {
      u[z] = static_cast<float>(spec.eos_base);
      u[r] = static_cast<float>(spec.eos_after_marker);
    } else if (pos != std::string::npos) {
      u[f0 + static_cast<int>(pos)] = static_cast<float>(spec.feature_gain);
      u[g0 + static_cast<int>(pos)] = static_cast<float>(spec.feature_gain);
    } else {
      for (int i = noise0; i < d; ++i) u[i] = static_cast<float>(rng.uniform(-spec.regular_logit, spec.regular_logit));
    }
  }
  w.validate();
  return w;
}

}  // namespace steerkit
