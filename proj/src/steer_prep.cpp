#include "steerkit/steer_prep.hpp"

#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

std::vector<float> difference(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(a[i] - b[i]);
  return out;
}

ActivationTap last_tap(const TinyLm& model, const std::string& text, int layer) {
  const auto tokens = tokenize(text);
  RunOptions opt;
  opt.tap_layer = layer;
  opt.logits = RunOptions::LogitsMode::kNone;
  return std::move(*model.run(tokens, opt).tap);
}

SteeringEntry entry_from_taps(const ContrastivePair& pair, const ActivationTap& pos, const ActivationTap& neg,
                              const KeyEncoder& encoder) {
  SteeringEntry e;
  e.pair_id = pair.pair_id;
  e.source_ts = pair.source_ts;
  e.delta_attn = difference(pos.attn_out, neg.attn_out);
  e.delta_mlp = difference(pos.mlp_out, neg.mlp_out);
  e.delta_whole = difference(pos.whole_out, neg.whole_out);
  std::string key_text = pair.positive_text;
  key_text += kPairSeparator;
  key_text += pair.negative_text;
  e.key = encoder.encode(key_text);
  return e;
}

}  // namespace

std::string render_teacher_forced(std::string_view context, std::string_view query, std::string_view answer) {
  std::string out;
  if (!context.empty()) {
    out += context;
    out += '\n';
  }
  out += "Q: ";
  out += query;
  out += "\nA: ";
  out += answer;
  return out;
}

std::vector<ContrastivePair> build_contrastive_pairs(const InteractionRecord& record, const UserCorpus& corpus,
                                                     int n_negatives, std::uint64_t seed, int context_records) {
  if (n_negatives < 1) throw InvalidArgument("n_negatives must be >= 1");
  const ContextBlock positive = retrieve_positive(record.query, record.user_id, corpus, context_records, &record.id);
  const std::string positive_text = render_teacher_forced(positive.text, record.query, record.answer);
  std::vector<ContrastivePair> pairs;
  pairs.reserve(n_negatives);
  for (int i = 0; i < n_negatives; ++i) {
    const ContextBlock negative = sample_negative(record.user_id, corpus, context_records, seed + i);
    ContrastivePair p;
    p.pair_id = static_cast<std::uint32_t>(i);
    p.record_id = record.id;
    p.source_ts = record.ts;
    p.query = record.query;
    p.answer = record.answer;
    p.positive_text = positive_text;
    p.negative_text = render_teacher_forced(negative.text, record.query, record.answer);
    p.neg_index = i;
    p.positive_sources = positive.source_record_ids;
    p.negative_sources = negative.source_record_ids;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

SteeringEntry extract_deltas(const ContrastivePair& pair, const TinyLm& model, const HookConfig& hook,
                             const KeyEncoder& encoder) {
  const ActivationTap pos = last_tap(model, pair.positive_text, hook.layer);
  const ActivationTap neg = last_tap(model, pair.negative_text, hook.layer);
  return entry_from_taps(pair, pos, neg, encoder);
}

std::vector<SteeringDict> build_dicts(std::string_view user, const UserCorpus& corpus, const TinyLm& model,
                                      const std::vector<int>& layers, const PrepConfig& config, BuildReport* report) {
  const auto train = corpus.train(user);
  if (train.empty()) throw CorpusError("user '" + std::string(user) + "' has no train records");
  if (layers.empty()) throw InvalidArgument("build_dicts: no layers");
  for (int layer : layers) {
    if (layer < 0 || layer >= model.config().n_layers) {
      throw InvalidArgument("hook layer " + std::to_string(layer) + " does not exist in the model");
    }
  }
  std::vector<SteeringDict> dicts(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    dicts[i].user_id = std::string(user);
    dicts[i].fingerprint = model.fingerprint();
    dicts[i].layer = layers[i];
    dicts[i].d_model = model.config().d_model;
    dicts[i].key_dim = config.encoder.dim();
  }
  RunOptions opt;
  opt.tap_layers = layers;
  opt.logits = RunOptions::LogitsMode::kNone;
  auto taps = [&](const std::string& text) { return model.run(tokenize(text), opt).layer_taps; };

  BuildReport local;
  std::uint32_t next_pair = 0;
  for (const auto& record : train) {
    ++local.records;
    auto pairs = build_contrastive_pairs(record, corpus, config.n_negatives, mix_seed(config.seed, record.id),
                                         config.context_records);
    // Every pair of a record shares its positive text.
    std::vector<ActivationTap> pos;
    std::string pos_error;
    try {
      pos = taps(pairs.front().positive_text);
    } catch (const SequenceLengthError& e) {
      pos_error = e.what();
    }
    for (auto& pair : pairs) {
      pair.pair_id = next_pair++;
      ++local.pairs;
      try {
        if (pos.empty()) throw SequenceLengthError(pos_error);
        const auto neg = taps(pair.negative_text);
        SteeringEntry first = entry_from_taps(pair, pos[0], neg[0], config.encoder);
        for (std::size_t i = 1; i < layers.size(); ++i) {
          SteeringEntry e = first;
          e.delta_attn = difference(pos[i].attn_out, neg[i].attn_out);
          e.delta_mlp = difference(pos[i].mlp_out, neg[i].mlp_out);
          e.delta_whole = difference(pos[i].whole_out, neg[i].whole_out);
          dicts[i].entries.push_back(std::move(e));
        }
        dicts[0].entries.push_back(std::move(first));
      } catch (const SequenceLengthError& e) {
        ++local.skipped;
        local.warnings.push_back("record " + std::to_string(record.id) + " pair " + std::to_string(pair.pair_id) +
                                 " skipped: " + e.what());
      }
    }
  }
  if (report) *report = std::move(local);
  return dicts;
}

SteeringDict build_dict(std::string_view user, const UserCorpus& corpus, const TinyLm& model, const HookConfig& hook,
                        const PrepConfig& config, BuildReport* report) {
  return std::move(build_dicts(user, corpus, model, {hook.layer}, config, report).front());
}

}  // namespace steerkit
