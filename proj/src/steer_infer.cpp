#include "steerkit/steer_infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "steerkit/corpus.hpp"
#include "steerkit/metrics.hpp"

namespace steerkit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<float> weighted_sum(const std::vector<const std::vector<float>*>& vs, const std::vector<double>& w,
                                double denom) {
  const std::size_t d = vs.front()->size();
  std::vector<double> acc(d, 0.0);
  for (std::size_t j = 0; j < vs.size(); ++j) {
    for (std::size_t i = 0; i < d; ++i) acc[i] += w[j] * (*vs[j])[i];
  }
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(acc[i] / denom);
  return out;
}

void check_dict_dims(const SteeringDict& dict) {
  for (const auto& e : dict.entries) {
    if (e.key.dim() != dict.key_dim || static_cast<int>(e.delta_attn.size()) != dict.d_model ||
        static_cast<int>(e.delta_mlp.size()) != dict.d_model || static_cast<int>(e.delta_whole.size()) != dict.d_model) {
      throw DimensionMismatch("entry " + std::to_string(e.pair_id) + " does not match the dictionary dimensions");
    }
  }
}

}  // namespace

std::string_view to_string(Aggregation a) { return a == Aggregation::kMean ? "mean" : "attentive"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::kMean;
  if (s == "attentive") return Aggregation::kAttentive;
  throw InvalidArgument("unknown aggregation '" + std::string(s) + "' (expected mean or attentive)");
}

void InjectionConfig::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0) throw InvalidArgument(std::string(name) + " must be finite and >= 0");
  };
  check(gamma, "gamma");
  check(effective_alpha(), "alpha");
  check(effective_beta(), "beta");
  if (top_k < 1) throw InvalidArgument("top_k must be >= 1");
}

Selection select_topk(const KeyVector& query_key, const SteeringDict& dict, int k) {
  if (dict.entries.empty()) throw InvalidArgument("select_topk: empty dictionary");
  if (k < 1) throw InvalidArgument("select_topk: k must be >= 1");
  if (query_key.dim() != dict.key_dim) {
    throw DimensionMismatch("query key has dimension " + std::to_string(query_key.dim()) + ", dictionary uses " +
                            std::to_string(dict.key_dim));
  }
  const std::size_t n = dict.entries.size();
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = cosine_distance(query_key, dict.entries[i].key);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min<std::size_t>(n, static_cast<std::size_t>(k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  Selection sel;
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
  for (std::size_t i : sel.indices) sel.distances.push_back(dist[i]);
  return sel;
}

Selection select_topk(std::string_view query, const SteeringDict& dict, int k, const KeyEncoder& encoder) {
  return select_topk(encoder.encode(query), dict, k);
}

AggregatedSteering aggregate(const SteeringDict& dict, const Selection& selection, Aggregation mode) {
  const std::size_t k = selection.indices.size();
  if (k == 0) throw InvalidArgument("aggregate: empty selection");
  if (selection.distances.size() != k) throw DimensionMismatch("aggregate: distances not aligned with selection");
  for (std::size_t i : selection.indices) {
    if (i >= dict.entries.size()) throw InvalidArgument("aggregate: selection index out of range");
  }
  AggregatedSteering out;
  out.distances = selection.distances;
  out.weights.assign(k, 1.0);
  if (mode == Aggregation::kAttentive) {
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      out.weights[j] = std::max(1.0 - selection.distances[j], 0.0);
      total += out.weights[j];
    }
    if (total > 0) {
      for (auto& w : out.weights) w /= total;
    } else {
      out.mean_fallback = true;
      out.weights.assign(k, 1.0);
    }
  }
  // Unnormalized weights and their sum, reordered canonically for the vector sum.
  std::vector<double> raw(k);
  for (std::size_t j = 0; j < k; ++j) {
    raw[j] = mode == Aggregation::kAttentive && !out.mean_fallback
                 ? std::max(1.0 - selection.distances[j], 0.0)
                 : 1.0;
  }
  if (mode == Aggregation::kMean || out.mean_fallback) {
    for (auto& w : out.weights) w = 1.0 / static_cast<double>(k);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ea = dict.entries[selection.indices[a]];
    const auto& eb = dict.entries[selection.indices[b]];
    if (raw[a] != raw[b]) return raw[a] < raw[b];
    return std::tie(ea.pair_id, ea.delta_attn, ea.delta_mlp, ea.delta_whole) <
           std::tie(eb.pair_id, eb.delta_attn, eb.delta_mlp, eb.delta_whole);
  });
  std::vector<const std::vector<float>*> attn, mlp, whole;
  std::vector<double> w;
  double denom = 0;
  for (std::size_t j : order) {
    const auto& e = dict.entries[selection.indices[j]];
    attn.push_back(&e.delta_attn);
    mlp.push_back(&e.delta_mlp);
    whole.push_back(&e.delta_whole);
    w.push_back(raw[j]);
    denom += raw[j];
  }
  out.s_attn = weighted_sum(attn, w, denom);
  out.s_mlp = weighted_sum(mlp, w, denom);
  out.s_whole = weighted_sum(whole, w, denom);
  for (std::size_t i : selection.indices) out.selected_pair_ids.push_back(dict.entries[i].pair_id);
  return out;
}

InjectionPayload make_payload(const AggregatedSteering& agg, const InjectionConfig& cfg, int layer) {
  InjectionPayload p;
  p.layer = layer;
  switch (cfg.granularity) {
    case Granularity::kAttn:
      p.s_attn = agg.s_attn;
      p.alpha = cfg.effective_alpha();
      break;
    case Granularity::kMlp:
      p.s_mlp = agg.s_mlp;
      p.beta = cfg.effective_beta();
      break;
    case Granularity::kWhole:
      p.s_whole = agg.s_whole;
      p.gamma = cfg.gamma;
      break;
    case Granularity::kAttnMlp:
      p.s_attn = agg.s_attn;
      p.s_mlp = agg.s_mlp;
      p.alpha = cfg.effective_alpha();
      p.beta = cfg.effective_beta();
      break;
  }
  return p;
}

SteeredOutput steered_generate(std::string_view query, const SteeringDict& dict, const TinyLm& model,
                               const InjectionConfig& cfg, const GenerateOptions& options,
                               const KeyEncoder& encoder) {
  cfg.validate();
  const auto prompt = tokenize(render_query_prompt("", query));
  SteeredOutput out;
  out.layer = cfg.layer >= 0 ? cfg.layer : dict.layer;
  if (dict.entries.empty()) {
    out.cold_start = true;
    const auto t0 = Clock::now();
    out.tokens = model.generate(prompt, nullptr, options);
    out.generation_seconds = seconds_since(t0);
    out.text = detokenize(out.tokens);
    return out;
  }
  if (cfg.layer >= 0 && cfg.layer != dict.layer && !cfg.override_layer) {
    throw InvalidArgument("dictionary was built at layer " + std::to_string(dict.layer) + ", not " +
                          std::to_string(cfg.layer));
  }
  if (dict.d_model != model.config().d_model) {
    throw DimensionMismatch("dictionary d_model " + std::to_string(dict.d_model) + " does not match the model (" +
                            std::to_string(model.config().d_model) + ")");
  }
  check_dict_dims(dict);
  const auto t0 = Clock::now();
  const Selection sel = select_topk(query, dict, cfg.top_k, encoder);
  out.aggregation = aggregate(dict, sel, cfg.aggregation);
  const InjectionPayload payload = make_payload(out.aggregation, cfg, out.layer);
  out.retrieval_seconds = seconds_since(t0);
  const auto t1 = Clock::now();
  out.tokens = model.generate(prompt, &payload, options);
  out.generation_seconds = seconds_since(t1);
  out.text = detokenize(out.tokens);
  return out;
}

std::string plain_generate(std::string_view query, const TinyLm& model, const GenerateOptions& options) {
  const auto prompt = tokenize(render_query_prompt("", query));
  return detokenize(model.generate(prompt, nullptr, options));
}

std::vector<TokenId> reference_tokens(std::string_view reference) {
  if (reference.empty()) return {kEndOfText};
  return tokenize(reference);
}

std::vector<int> tune_layers(int n_layers) {
  const int lo = std::clamp(static_cast<int>(std::floor(0.4 * n_layers)), 0, n_layers - 1);
  const int hi = std::clamp(static_cast<int>(std::ceil(0.6 * n_layers)), 0, n_layers - 1);
  std::vector<int> out;
  for (int l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

std::vector<double> tune_gammas() {
  std::vector<double> out;
  for (int k = 1; k <= 16; ++k) out.push_back(k / 20.0);
  return out;
}

TuneResult tune(const std::vector<ValidationExample>& validation, const DictProvider& dicts, const TinyLm& model,
                const InjectionConfig& base, const GenerateOptions& options, const KeyEncoder& encoder) {
  if (validation.empty()) throw InvalidArgument("tune: empty validation set");
  const double n = static_cast<double>(validation.size());
  std::vector<std::vector<TokenId>> prompts, refs;
  TuneResult result;
  for (const auto& ex : validation) {
    prompts.push_back(tokenize(render_query_prompt("", ex.query)));
    refs.push_back(reference_tokens(ex.reference));
    result.baseline_rouge1 += rouge1(detokenize(model.generate(prompts.back(), nullptr, options)), ex.reference) / n;
    result.baseline_logprob += model.mean_logprob(prompts.back(), refs.back(), nullptr) / n;
  }
  const double floor_lp = result.baseline_logprob - kLogprobGuard * std::abs(result.baseline_logprob);
  const auto layers = tune_layers(model.config().n_layers);
  const TuneRow* best = nullptr;
  for (int layer : layers) {
    for (double gamma : tune_gammas()) {
      InjectionConfig cfg = base;
      cfg.layer = layer;
      cfg.override_layer = false;
      cfg.gamma = gamma;
      cfg.alpha = gamma;
      cfg.beta = gamma;
      TuneRow row{layer, gamma, 0, 0, 0, false};
      for (std::size_t i = 0; i < validation.size(); ++i) {
        const auto& ex = validation[i];
        const SteeringDict& dict = dicts(ex.user, layer);
        const SteeredOutput s = steered_generate(ex.query, dict, model, cfg, options, encoder);
        row.rouge1 += rouge1(s.text, ex.reference) / n;
        row.rougeL += rougeL(s.text, ex.reference) / n;
        double lp;
        if (s.cold_start) {
          lp = model.mean_logprob(prompts[i], refs[i], nullptr);
        } else {
          const InjectionPayload payload = make_payload(s.aggregation, cfg, layer);
          lp = model.mean_logprob(prompts[i], refs[i], &payload);
        }
        row.mean_logprob += lp / n;
      }
      row.qualified = row.mean_logprob >= floor_lp;
      result.rows.push_back(row);
    }
  }
  // Rows are already in (layer, gamma) order, so the first strict maximum wins ties.
  for (const auto& row : result.rows) {
    if (row.qualified && (!best || row.rouge1 > best->rouge1)) best = &row;
  }
  if (best) {
    result.layer = best->layer;
    result.gamma = best->gamma;
    result.steered = true;
  } else {
    result.layer = layers.front();
    result.gamma = 0.0;
  }
  return result;
}

std::string tune_report_jsonl(const std::vector<TuneRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["gamma"] = r.gamma;
    j["rouge1"] = r.rouge1;
    j["rougeL"] = r.rougeL;
    j["mean_logprob"] = r.mean_logprob;
    j["qualified"] = r.qualified;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace steerkit
